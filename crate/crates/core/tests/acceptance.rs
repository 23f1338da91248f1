//! Acceptance checks 1-9. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Criteria 6 and 7 train networks for up to half an hour and two hours
//! respectively; they run when `STAIRNET_ACCEPTANCE_LONG=1` is set or when
//! selected explicitly (`cargo test --test acceptance -- 6 7`).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stairnet::data::{
    derive_seed, encode_labels, generate_dataset, generate_synthetic_scene,
    DetectedSegment, GridConfig, LabelGrid, LineAnnotation, LineClass, Point,
    SyntheticSceneParams, MIN_CLIP_LEN,
};
use stairnet::eval::{
    endpoint_confidence, fwiou, match_cells, mfwiou, precision_recall, CellOutcomeCounts,
    ConfidenceConfig, THRESHOLD_STEPS,
};
use stairnet::loss::{total_loss, total_loss_with_grad, LossConfig, MaskSource};
use stairnet::model::{ModelConfig, StairNet};
use stairnet::nn::Mode;
use stairnet::tensor::Tensor;
use stairnet::train::{evaluate_prepared, lr_schedule, EvalConfig, PreparedSample, TrainConfig, Trainer};
use std::time::{Duration, Instant};

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

// ---------------------------------------------------------------- criterion 1

/// Output sizes `(name, channels at 1x, side)` read off the architecture table.
fn architecture_table() -> Vec<(String, usize, usize)> {
    let mut rows = vec![("Initial".to_string(), 64, 256)];
    for k in 0..3 {
        rows.push((format!("Bottleneck 1.{k}"), 256, 128));
    }
    // Section 3 repeats section 2 without downsampling.
    for section in [2, 3] {
        for k in 0..8 {
            rows.push((format!("Bottleneck {section}.{k}"), 512, 64));
        }
    }
    rows.push(("ASPP".into(), 512, 64));
    rows.push(("Conv 3x3".into(), 128, 64));
    rows.push(("classification Conv 3x3".into(), 128, 64));
    rows.push(("classification Conv 1x1".into(), 2, 64));
    rows.push(("classification Sigmoid".into(), 2, 64));
    rows.push(("location Conv 3x3".into(), 128, 64));
    rows.push(("location Conv 1x1".into(), 8, 64));
    rows.push(("location Sigmoid".into(), 8, 64));
    rows
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let x = Tensor::full([1, 3, 512, 512], 0.5);
    let mut problems = Vec::new();
    for width in [1.0, 0.5, 0.25] {
        let mut model = StairNet::new(ModelConfig::with_width(width)).expect("model builds");
        let out = model.forward(&x, Mode::Eval).expect("forward runs");
        if out.logits.shape() != [1, 2, 64, 64] || out.loc.shape() != [1, 8, 64, 64] {
            problems.push(format!("{width}x: outputs {:?} {:?}", out.logits.shape(), out.loc.shape()));
        }
        if !out.loc.data().iter().all(|&v| v > 0.0 && v < 1.0) {
            problems.push(format!("{width}x: location outside (0, 1)"));
        }
        let expected: Vec<(String, [usize; 3])> = architecture_table()
            .into_iter()
            .map(|(name, c, side)| {
                // Output heads keep their channel count; everything else scales.
                let fixed = c == 2 || c == 8;
                let ch = if fixed { c } else { (c as f64 * width).round() as usize };
                (name, [ch, side, side])
            })
            .collect();
        let got: Vec<(String, [usize; 3])> = model
            .last_trace()
            .iter()
            .map(|l| (l.name.clone(), l.shape))
            .collect();
        if got != expected {
            let first = got
                .iter()
                .zip(&expected)
                .find(|(g, e)| g != e)
                .map(|(g, e)| format!("got {g:?}, expected {e:?}"))
                .unwrap_or_else(|| format!("{} rows vs {}", got.len(), expected.len()));
            problems.push(format!("{width}x: {first}"));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    if secs >= 60.0 {
        problems.push(format!("runtime {secs:.1}s"));
    }
    if problems.is_empty() {
        outcome(true, format!("{} rows match at 1x/0.5x/0.25x in {secs:.1}s", architecture_table().len()))
    } else {
        outcome(false, problems.join("; "))
    }
}

// ---------------------------------------------------------------- criterion 2

fn criterion_2() -> Outcome {
    let count = |w: f64| {
        let mut m = StairNet::new(ModelConfig::with_width(w)).expect("model builds");
        m.param_report()
    };
    let (p1, p05, p025) = (count(1.0), count(0.5), count(0.25));
    let r1 = p1.total as f64 / p05.total as f64;
    let r2 = p05.total as f64 / p025.total as f64;
    let mb = p1.total as f64 * 4.0 / 1e6;
    let pass = (3.4..=4.0).contains(&r1) && (3.4..=4.0).contains(&r2) && (25.0..=45.0).contains(&mb);
    outcome(
        pass,
        format!(
            "params {} / {} / {}; ratios {r1:.3}, {r2:.3}; 1x size {mb:.2} MB",
            p1.total, p05.total, p025.total
        ),
    )
}

// ---------------------------------------------------------------- criterion 3

fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>, LabelGrid) {
    let grid = GridConfig::new(64, 8).expect("8x8 grid");
    let cells = grid.cells();
    let mut label = LabelGrid::empty(grid);
    for t in label.cls_target.iter_mut() {
        *t = if rng.random_bool(0.3) { 1.0 } else { 0.0 };
    }
    for t in label.loc_target.iter_mut() {
        *t = rng.random_range(0.0..1.0);
    }
    let logits = (0..2 * cells).map(|_| rng.random_range(-3.0..3.0)).collect();
    let loc = (0..8 * cells).map(|_| rng.random_range(0.02..0.98)).collect();
    (logits, loc, label)
}

/// Worst relative error between analytic and central-difference gradients.
fn gradient_error(logits: &[f64], loc: &[f64], label: &LabelGrid, cfg: &LossConfig) -> f64 {
    let h = 1e-4;
    let (_, grad) = total_loss_with_grad(logits, loc, label, cfg).expect("loss");
    let f = |lg: &[f64], lc: &[f64]| total_loss(lg, lc, label, cfg).expect("loss").total;
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
    let mut worst = 0.0f64;
    for i in 0..logits.len() {
        let (mut up, mut down) = (logits.to_vec(), logits.to_vec());
        up[i] += h;
        down[i] -= h;
        let n = (f(&up, loc) - f(&down, loc)) / (2.0 * h);
        worst = worst.max(rel(grad.d_logits[i], n));
    }
    for i in 0..loc.len() {
        let (mut up, mut down) = (loc.to_vec(), loc.to_vec());
        up[i] += h;
        down[i] -= h;
        let n = (f(logits, &up) - f(logits, &down)) / (2.0 * h);
        worst = worst.max(rel(grad.d_loc[i], n));
    }
    worst
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    let mut linear = true;
    let mut invariant = true;
    for k in 0..20 {
        let (logits, loc, label) = random_instance(&mut rng);
        let mask_source = if k % 2 == 0 { MaskSource::Truth } else { MaskSource::Pred };
        let cfg = LossConfig {
            mask_source,
            ..LossConfig::default()
        };
        worst = worst.max(gradient_error(&logits, &loc, &label, &cfg));

        let base = total_loss(&logits, &loc, &label, &LossConfig::default()).expect("loss");
        let doubled = total_loss(
            &logits,
            &loc,
            &label,
            &LossConfig {
                lambda_loc: 8.0,
                ..LossConfig::default()
            },
        )
        .expect("loss");
        linear &= (doubled.loc - 2.0 * base.loc).abs() <= 1e-12 * base.loc.abs().max(1.0)
            && doubled.cls == base.cls;

        // Location outputs of slots whose class is absent must not matter.
        let cells = label.grid.cells();
        let mut moved = loc.clone();
        for slot in 0..2 {
            for cell in 0..cells {
                if label.cls_target[slot * cells + cell] == 0.0 {
                    for j in 0..4 {
                        moved[(slot * 4 + j) * cells + cell] = rng.random_range(0.0..1.0);
                    }
                }
            }
        }
        let after = total_loss(&logits, &moved, &label, &LossConfig::default()).expect("loss");
        invariant &= after.total == base.total;
    }

    // One convex cell (0.2, 0.5)-(0.8, 0.5) predicted at (0.5, 0.5) in both
    // slots with probabilities 0.5; every other cell confidently empty.
    let grid = GridConfig::default();
    let cells = grid.cells();
    let mut label = LabelGrid::empty(grid);
    label.cls_target[0] = 1.0;
    for (j, v) in [0.2, 0.5, 0.8, 0.5].into_iter().enumerate() {
        label.loc_target[j * cells] = v;
        label.loc_target[(4 + j) * cells] = v;
    }
    let mut logits = vec![-60.0; 2 * cells];
    logits[0] = 0.0;
    logits[cells] = 0.0;
    let mut loc = vec![0.5; 8 * cells];
    for (c, t) in loc.iter_mut().zip(&label.loc_target) {
        if *t != 0.0 {
            *c = *t as f64;
        }
    }
    for j in 0..4 {
        loc[j * cells] = 0.5;
    }
    let single = total_loss(&logits, &loc, &label, &LossConfig::default()).expect("loss").total;
    // Hand computation: (2 ln 2 + 4 * (0.09 + 0.09)) / 4096.
    let hand = (1.386294 + 4.0 * 0.18) / 4096.0;
    let single_ok = (single - hand).abs() <= 1e-9;

    let pass = worst <= 1e-3 && single_ok && linear && invariant;
    outcome(
        pass,
        format!(
            "worst gradient rel err {worst:.2e} over 20 instances; single cell {single:.7e} \
             (hand {hand:.7e}, printed 5.1424e-4); lambda-linear {linear}; mask-invariant {invariant}"
        ),
    )
}

// ---------------------------------------------------------------- criterion 4

/// Independent clip: parameter interval where the segment lies in the cell.
fn oracle_pieces(line: &LineAnnotation, grid_n: usize, cell: f64) -> Vec<(usize, usize, Point, Point)> {
    let (a, b) = (line.p1, line.p2);
    let mut out = Vec::new();
    for row in 0..grid_n {
        for col in 0..grid_n {
            let (x0, y0) = (col as f64 * cell, row as f64 * cell);
            let mut lo = 0.0f64;
            let mut hi = 1.0f64;
            for (start, delta, min, max) in [(a.x, b.x - a.x, x0, x0 + cell), (a.y, b.y - a.y, y0, y0 + cell)] {
                if delta == 0.0 {
                    if start < min || start > max {
                        lo = 1.0;
                        hi = 0.0;
                    }
                } else {
                    let (t1, t2) = ((min - start) / delta, (max - start) / delta);
                    lo = lo.max(t1.min(t2));
                    hi = hi.min(t1.max(t2));
                }
            }
            if hi <= lo {
                continue;
            }
            let at = |t: f64| Point::new(a.x + t * (b.x - a.x), a.y + t * (b.y - a.y));
            let (p, q) = (at(lo), at(hi));
            if p.dist(q) < MIN_CLIP_LEN {
                continue;
            }
            let norm = |p: Point| Point::new((p.x - x0) / cell, (p.y - y0) / cell);
            out.push((row, col, norm(p), norm(q)));
        }
    }
    out
}

/// Horizontal-ish lines in separated bands; each band holds a convex line and
/// sometimes a concave one, so "both" cells occur but no cell holds two lines
/// of one class.
fn random_line_set(rng: &mut ChaCha8Rng) -> Vec<LineAnnotation> {
    let bands = rng.random_range(1..=6);
    let height = 512.0 / bands as f64;
    let mut lines = Vec::new();
    for band in 0..bands {
        let top = band as f64 * height + 9.0;
        let bottom = (band + 1) as f64 * height - 9.0;
        let mut classes = vec![LineClass::Convex];
        if rng.random_bool(0.5) {
            classes.push(LineClass::Concave);
        }
        for cls in classes {
            let x1 = rng.random_range(0.0..400.0);
            let x2 = rng.random_range(x1 + 5.0..512.0);
            let y1 = rng.random_range(top..bottom);
            let y2 = rng.random_range(top..bottom);
            lines.push(LineAnnotation::new(cls, Point::new(x1, y1), Point::new(x2, y2)));
        }
    }
    lines
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let grid = GridConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    let mut mismatches = 0usize;
    let mut pieces = 0usize;
    let mut sets = 0usize;
    let mut rejected = 0usize;
    while sets < 1000 {
        let lines = random_line_set(&mut rng);
        let mut expected = std::collections::BTreeMap::new();
        let mut resolvable = true;
        for line in &lines {
            for (row, col, p, q) in oracle_pieces(line, grid.grid_n, grid.cell_size as f64) {
                resolvable &= expected.insert((row, col, line.cls.index()), (p, q)).is_none();
            }
        }
        if !resolvable {
            rejected += 1;
            continue;
        }
        sets += 1;
        let decoded: Vec<DetectedSegment> = encode_labels(&lines, &grid).decode();
        if decoded.len() != expected.len() {
            mismatches += 1;
        }
        for d in decoded {
            let seg = d.to_cell_segment(&grid);
            match expected.get(&(d.row, d.col, d.cls.index())) {
                Some(&(p, q)) => {
                    let straight = seg.p1.dist(p).max(seg.p2.dist(q));
                    let swapped = seg.p1.dist(q).max(seg.p2.dist(p));
                    worst = worst.max(straight.min(swapped));
                    pieces += 1;
                }
                None => mismatches += 1,
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = mismatches == 0 && worst < 1e-6 && secs < 60.0;
    outcome(
        pass,
        format!(
            "{sets} sets ({rejected} rejected), {pieces} cell pieces, {mismatches} cell mismatches, \
             max endpoint error {worst:.2e} cells, {secs:.1}s"
        ),
    )
}

// ---------------------------------------------------------------- criterion 5

/// Direct per-cell evaluation of frequency-weighted IoU at threshold `c`.
fn brute_force_fwiou(label: &LabelGrid, preds: &[DetectedSegment], c: f64) -> Option<f64> {
    let n = label.grid.grid_n;
    let s = label.grid.cell_size as f64;
    let conf = |d: f64| if d > 1.0 { 0.0 } else { ((2.0 * (1.0 - d)).exp() - 1.0) / (2.0f64.exp() - 1.0) };
    let class_of = |convex: bool, concave: bool| match (convex, concave) {
        (true, false) => Some(0),
        (false, true) => Some(1),
        (true, true) => Some(2),
        (false, false) => None,
    };
    let (mut tp, mut fp, mut fn_) = ([0u64; 3], [0u64; 3], [0u64; 3]);
    for row in 0..n {
        for col in 0..n {
            let at = |k: usize| label.cls_target[(k * n + row) * n + col] >= 0.5;
            let gt = class_of(at(0), at(1));
            let here: Vec<&DetectedSegment> = preds.iter().filter(|p| p.row == row && p.col == col).collect();
            let has = |cls: LineClass| here.iter().any(|p| p.cls == cls);
            let pred = class_of(has(LineClass::Convex), has(LineClass::Concave));
            match (gt, pred) {
                (None, Some(p)) => fp[p] += 1,
                (None, None) => {}
                (Some(g), Some(p)) if g == p => {
                    let mut ok = true;
                    for cls in LineClass::ALL {
                        let k = cls.index();
                        if !at(k) {
                            continue;
                        }
                        let v = |j: usize| label.loc_target[((4 * k + j) * n + row) * n + col] as f64;
                        let gpts = [Point::new(v(0), v(1)), Point::new(v(2), v(3))];
                        let p = here.iter().find(|p| p.cls == cls).expect("class predicted");
                        let local = |q: Point| Point::new(q.x / s - col as f64, q.y / s - row as f64);
                        let ppts = [local(p.p1), local(p.p2)];
                        let score = gpts
                            .iter()
                            .map(|g| conf(g.dist(ppts[0]).min(g.dist(ppts[1]))))
                            .sum::<f64>()
                            / 2.0;
                        ok &= score >= c;
                    }
                    if ok {
                        tp[g] += 1;
                    } else {
                        fp[g] += 1;
                        fn_[g] += 1;
                    }
                }
                (Some(g), p) => {
                    fn_[g] += 1;
                    if let Some(p) = p {
                        fp[p] += 1;
                    }
                }
            }
        }
    }
    let total: u64 = (0..3).map(|i| tp[i] + fn_[i]).sum();
    if total == 0 {
        return None;
    }
    Some(
        (0..3)
            .map(|i| {
                let d = tp[i] + fp[i] + fn_[i];
                if d == 0 {
                    0.0
                } else {
                    (tp[i] + fn_[i]) as f64 / total as f64 * tp[i] as f64 / d as f64
                }
            })
            .sum(),
    )
}

fn random_eval_case(rng: &mut ChaCha8Rng) -> (LabelGrid, Vec<DetectedSegment>) {
    let n = rng.random_range(1..=8);
    let grid = GridConfig::new(n * 8, n).expect("grid");
    let cells = grid.cells();
    let mut label = LabelGrid::empty(grid);
    let mut preds = Vec::new();
    for row in 0..n {
        for col in 0..n {
            let cell = row * n + col;
            for cls in LineClass::ALL {
                let k = cls.index();
                let present = rng.random_bool(0.4);
                if present {
                    label.cls_target[k * cells + cell] = 1.0;
                }
                let g: [f32; 4] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
                for (j, v) in g.iter().enumerate() {
                    label.loc_target[(4 * k + j) * cells + cell] = *v;
                }
                // Predictions mostly agree with the truth, with jittered ends.
                let predicted = if rng.random_bool(0.8) { present } else { !present };
                if predicted {
                    let jitter = rng.random_range(0.0..0.6);
                    let mut p = |x: f32, y: f32| {
                        Point::new(
                            (col as f64 + x as f64 + rng.random_range(-jitter..=jitter)) * 8.0,
                            (row as f64 + y as f64 + rng.random_range(-jitter..=jitter)) * 8.0,
                        )
                    };
                    let (p1, p2) = (p(g[0], g[1]), p(g[2], g[3]));
                    preds.push(DetectedSegment {
                        row,
                        col,
                        cls,
                        p1,
                        p2,
                        score: 0.9,
                    });
                }
            }
        }
    }
    (label, preds)
}

fn criterion_5() -> Outcome {
    let cfg = ConfidenceConfig::default();
    let (c0, c1, c5) = (
        endpoint_confidence(0.0, &cfg),
        endpoint_confidence(1.0, &cfg),
        endpoint_confidence(0.5, &cfg),
    );
    let values_ok = c0 == 1.0 && c1 == 0.0 && (c5 - 0.268941).abs() <= 1e-6;

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut oracle_ok = 0;
    let mut compared = 0;
    for _ in 0..100 {
        let (label, preds) = random_eval_case(&mut rng);
        let c = rng.random_range(1..=19) as f64 / 20.0;
        let counts = match_cells(&preds, &label, c, &cfg).expect("grids agree");
        let ours = fwiou(&counts).ok();
        let oracle = brute_force_fwiou(&label, &preds, c);
        compared += 1;
        if ours == oracle {
            oracle_ok += 1;
        }
    }

    let worked = CellOutcomeCounts {
        tp: [8, 9, 0],
        fp: [1, 2, 0],
        fn_: [2, 1, 0],
        ..CellOutcomeCounts::default()
    };
    let w = fwiou(&worked).expect("gt present");
    let (acc, rec) = precision_recall(&worked);
    let worked_ok = (w - 0.738636).abs() <= 1e-6 && (acc - 0.85).abs() < 1e-12 && (rec - 0.85).abs() < 1e-12;

    let (label, preds) = random_eval_case(&mut ChaCha8Rng::seed_from_u64(55));
    let report = mfwiou(&[preds], &[label], &cfg).expect("report");
    let mean = report.rows.iter().map(|r| r.fwiou).sum::<f64>() / report.rows.len() as f64;
    let steps_ok = report.rows.len() == 19
        && THRESHOLD_STEPS == 19
        && report
            .rows
            .iter()
            .enumerate()
            .all(|(k, r)| (r.threshold - (k + 1) as f64 / 20.0).abs() < 1e-12)
        && (report.mfwiou - mean).abs() < 1e-15;

    let pass = values_ok && oracle_ok == compared && worked_ok && steps_ok;
    outcome(
        pass,
        format!(
            "c(0)={c0} c(1)={c1} c(0.5)={c5:.6}; oracle agreement {oracle_ok}/{compared}; \
             worked example {w:.6}; {} thresholds, mFWIOU {:.6} = mean {mean:.6}",
            report.rows.len(),
            report.mfwiou
        ),
    )
}

// ------------------------------------------------------------ criteria 6 and 7

fn synthetic_set(base_seed: u64, count: usize) -> Vec<PreparedSample> {
    let params = SyntheticSceneParams::default();
    (0..count)
        .map(|i| {
            let scene = generate_synthetic_scene(&params.clone().with_seed(derive_seed(base_seed, i as u64)))
                .expect("default scene parameters are feasible");
            PreparedSample {
                name: format!("{base_seed}-{i}"),
                image: scene.image,
                annotations: scene.annotations,
            }
        })
        .collect()
}

fn quarter_model() -> StairNet {
    StairNet::new(ModelConfig::with_width(0.25)).expect("model builds")
}

fn criterion_6() -> Outcome {
    let budget = Duration::from_secs(30 * 60);
    let start = Instant::now();
    let data = synthetic_set(6, 16);
    let cfg = TrainConfig {
        epochs: 500,
        max_steps: Some(2000),
        mirror: false,
        occlusion: false,
        seed: 6,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(quarter_model(), cfg).expect("valid config");
    let eval = EvalConfig::default();
    let mut last = (0.0, 0.0);
    while !trainer.finished() && start.elapsed() < budget {
        let stats = trainer.run_epoch(&data, start).expect("training runs");
        if stats.epoch % 5 == 4 || trainer.finished() {
            let r = evaluate_prepared(&mut trainer.model, &data, &eval).expect("eval runs");
            last = (r.operating.fwiou, r.operating.recall);
            eprintln!(
                "  [6] epoch {} step {} loss {:.5} FWIOU {:.4} recall {:.4} ({:.0}s)",
                stats.epoch,
                trainer.state().step,
                stats.loss.total,
                last.0,
                last.1,
                start.elapsed().as_secs_f64()
            );
            if last.0 >= 0.85 && last.1 >= 0.85 {
                break;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let steps = trainer.state().step;
    let pass = last.0 >= 0.85 && last.1 >= 0.85 && steps <= 2000 && secs <= budget.as_secs_f64();
    outcome(
        pass,
        format!("FWIOU@0.5 {:.4}, recall {:.4} after {steps} steps in {secs:.0}s", last.0, last.1),
    )
}

fn criterion_7() -> Outcome {
    let budget = Duration::from_secs(2 * 3600);
    let start = Instant::now();
    let train = synthetic_set(70, 200);
    let held_out = synthetic_set(71, 50);
    // The schedule shape of the default recipe compressed to the run length.
    let epochs = 16;
    let cfg = TrainConfig {
        epochs,
        lr_halving_period: epochs / 4,
        seed: 7,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(quarter_model(), cfg).expect("valid config");
    let mut epoch_secs = 0.0f64;
    while !trainer.finished() {
        let before = start.elapsed().as_secs_f64();
        // Keep room for the held-out evaluation.
        if before + epoch_secs + 120.0 > budget.as_secs_f64() {
            break;
        }
        let stats = trainer.run_epoch(&train, start).expect("training runs");
        epoch_secs = start.elapsed().as_secs_f64() - before;
        eprintln!(
            "  [7] epoch {} lr {:.2e} loss {:.5} ({:.0}s)",
            stats.epoch,
            stats.lr,
            stats.loss.total,
            start.elapsed().as_secs_f64()
        );
    }
    let report = evaluate_prepared(&mut trainer.model, &held_out, &EvalConfig::default()).expect("eval runs");
    let secs = start.elapsed().as_secs_f64();
    let fw = report.operating.fwiou;
    let pass = fw >= 0.5 && secs <= budget.as_secs_f64();
    outcome(
        pass,
        format!(
            "held-out FWIOU@0.5 {fw:.4} (recall {:.4}, mFWIOU {:.4}) after {} epochs in {secs:.0}s",
            report.operating.recall,
            report.mfwiou,
            trainer.state().epoch
        ),
    )
}

// ---------------------------------------------------------------- criterion 8

fn criterion_8() -> Outcome {
    let cfg = TrainConfig::default();
    let got: Vec<f64> = [0, 50, 100, 150].iter().map(|&e| lr_schedule(e, &cfg)).collect();
    let want = [5e-4, 2.5e-4, 1.25e-4, 6.25e-5];
    outcome(got == want, format!("lr at epochs 0/50/100/150 = {got:?}"))
}

// ---------------------------------------------------------------- criterion 9

fn tree_bytes(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).expect("readable dir") {
            let path = entry.expect("entry").path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).expect("inside").to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&path).expect("readable file")));
            }
        }
    }
    out.sort();
    out
}

fn criterion_9() -> Outcome {
    let tmp = tempfile::tempdir().expect("temp dir");
    let params = SyntheticSceneParams::default().with_seed(9);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    generate_dataset(&a, &params, 6).expect("generate");
    generate_dataset(&b, &params, 6).expect("generate");
    let (ta, tb) = (tree_bytes(&a), tree_bytes(&b));
    let generate_same = ta == tb && ta.len() == 13;

    let data = synthetic_set(9, 2);
    let images: Vec<&image::RgbImage> = data.iter().map(|s| &s.image).collect();
    let batch = stairnet::model::images_to_batch(&images).expect("batch");
    let run = || {
        let mut m = quarter_model();
        m.forward(&batch, Mode::Eval).expect("forward")
    };
    let (x, y) = (run(), run());
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let infer_same = bits(&x.logits) == bits(&y.logits) && bits(&x.loc) == bits(&y.loc);
    outcome(
        generate_same && infer_same,
        format!("generate identical: {generate_same} ({} files); eval inference identical: {infer_same}", ta.len()),
    )
}

// --------------------------------------------------------------------- driver

type Check = fn() -> Outcome;

fn main() {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let long = std::env::var("STAIRNET_ACCEPTANCE_LONG").is_ok_and(|v| v == "1");
    let checks: [(usize, &str, Check, bool); 9] = [
        (1, "shape contract", criterion_1, false),
        (2, "parameter scaling", criterion_2, false),
        (3, "loss correctness", criterion_3, false),
        (4, "codec round-trip", criterion_4, false),
        (5, "metric oracle", criterion_5, false),
        (6, "overfit 16 images", criterion_6, true),
        (7, "generalization 200/50", criterion_7, true),
        (8, "learning-rate schedule", criterion_8, false),
        (9, "determinism", criterion_9, false),
    ];
    let mut failed = 0;
    for (n, name, check, is_long) in checks {
        let selected = if args.is_empty() { !is_long || long } else { args.contains(&n) };
        if !selected {
            if args.is_empty() {
                println!("criterion {n} ({name}): SKIPPED (long run; set STAIRNET_ACCEPTANCE_LONG=1 or pass {n})");
            } else {
                println!("criterion {n} ({name}): SKIPPED (not selected)");
            }
            continue;
        }
        let o = check();
        println!("criterion {n} ({name}): {} - {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass {
            failed += 1;
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

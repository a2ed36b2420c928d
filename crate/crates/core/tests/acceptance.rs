mod common;

use std::io::Write as _;
use std::time::Instant;

use common::{gradient_errors, jittered, random2};
use ndarray::{array, s, Array1, Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stressad_core::detection::{percentile, threshold, Calibration, ScoreSeries, ThresholdSpec};
use stressad_core::eval::{
    ablate_sampling, confusion, dunn_pooled, dunn_posthoc, extract, friedman_test, run_pipeline, Adjustment, MethodScoreTable,
    PipelineConfig,
};
use stressad_core::model::{
    bilinear_resize, dylinear, tower, variable_attention, time_attention, Attention, LayerNorm, Linear, ModelConfig,
    ModelState, TokenKind, TokenTensor, LN_EPS,
};
use stressad_core::signal::{generate_synthetic, GeneratorConfig, SignalKind};
use stressad_core::training::{
    evaluate, load_checkpoint, save_checkpoint, split_train_val, train, Checkpoint, TrainConfig, TrainMode,
};
use stressad_core::vitals::{
    compute_vitals, detect_beats, make_windows, normalize, BeatSeries, Normalizer, RR_MAX_S, RR_MIN_S,
};
use stressad_core::Error;

/// Writes straight to the process stderr so the verdict shows without `--nocapture`.
fn verdict(criterion: u32, ok: bool, detail: &str) {
    let line = format!("{} criterion {criterion}: {detail}\n", if ok { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().lock().write_all(line.as_bytes());
}

fn note(text: &str) {
    let _ = std::io::stderr().lock().write_all(format!("  {text}\n").as_bytes());
}

fn random3(shape: (usize, usize, usize), seed: u64) -> Array3<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array3::from_shape_simple_fn(shape, || rng.gen_range(-1.0..1.0))
}

fn randomized(config: ModelConfig, seed: u64) -> ModelState {
    let mut s = ModelState::init(config).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in s.params_mut() {
        for x in p.data.iter_mut() {
            *x = rng.gen_range(-0.5..0.5);
        }
    }
    s
}

fn max_abs(a: impl IntoIterator<Item = f64>, b: impl IntoIterator<Item = f64>) -> f64 {
    a.into_iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn param_bits(s: &ModelState) -> Vec<(String, Vec<u64>)> {
    s.params()
        .into_iter()
        .map(|p| (p.name.clone(), p.data.iter().map(|x| x.to_bits()).collect()))
        .collect()
}

/// Average ranks, 1 = smallest.
fn ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let below = x.iter().filter(|&&o| o < v).count() as f64;
            let equal = x.iter().filter(|&&o| o == v).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect()
}

fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx) * (a - mx)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my) * (b - my)).sum();
    cov / (vx * vy).sqrt()
}

// ---------------------------------------------------------------- criterion 1

#[test]
fn criterion_01_gradient_check() {
    let start = Instant::now();
    let mut worst = ("".to_string(), 0.0f64);
    let mut groups = 0;
    for (patch_size, seed) in [(1usize, 21u64), (2, 22)] {
        let config = ModelConfig {
            n_vars: 2,
            window_len: 4,
            patch_size,
            embed_dim: 8,
            n_blocks: 2,
            n_heads: 2,
            n_prompt: 2,
            seed,
        };
        let state = jittered(config, seed + 100);
        let x = random2((4, 2), seed + 200);
        let y = random2((4, 2), seed + 300);
        let errors = gradient_errors(&state, x.view(), y.view(), None, 1e-5, 1e-6);
        groups = errors.len();
        for (name, e) in errors {
            if e > worst.1 {
                worst = (format!("k={patch_size} {name}"), e);
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let ok = worst.1 < 1e-4 && secs < 60.0;
    verdict(
        1,
        ok,
        &format!(
            "max relative gradient error {:.2e} ({}) over {groups} parameter groups, {secs:.1} s",
            worst.1, worst.0
        ),
    );
    assert!(ok);
}

// ---------------------------------------------------------------- criterion 2

fn naive_ln(x: &[f64], ln: &LayerNorm) -> Vec<f64> {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    x.iter()
        .enumerate()
        .map(|(j, v)| (v - mean) / (var + LN_EPS).sqrt() * ln.gamma[j] + ln.beta[j])
        .collect()
}

fn naive_linear(x: &[f64], l: &Linear) -> Vec<f64> {
    (0..l.w.ncols())
        .map(|o| l.b[o] + (0..x.len()).map(|i| x[i] * l.w[[i, o]]).sum::<f64>())
        .collect()
}

fn naive_mhsa(seq: &[Vec<f64>], a: &Attention, heads: usize) -> Vec<Vec<f64>> {
    let q: Vec<_> = seq.iter().map(|x| naive_linear(x, &a.query)).collect();
    let k: Vec<_> = seq.iter().map(|x| naive_linear(x, &a.key)).collect();
    let v: Vec<_> = seq.iter().map(|x| naive_linear(x, &a.value)).collect();
    let d = seq[0].len();
    let dh = d / heads;
    let mut o = vec![vec![0.0; d]; seq.len()];
    for h in 0..heads {
        for i in 0..seq.len() {
            let sc: Vec<f64> = (0..seq.len())
                .map(|j| (0..dh).map(|c| q[i][h * dh + c] * k[j][h * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let m = sc.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = sc.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..seq.len() {
                for c in 0..dh {
                    o[i][h * dh + c] += e[j] / z * v[j][h * dh + c];
                }
            }
        }
    }
    o.iter().map(|row| naive_linear(row, &a.out)).collect()
}

/// Residual attention over one axis; `along_time` picks the sequence axis,
/// positions before `skip` are left untouched for variable attention.
fn attention_oracle(state: &ModelState, x: &Array3<f64>, block: usize, along_time: bool, skip: usize) -> Array3<f64> {
    let blk = &state.blocks[block];
    let (l, n, _) = x.dim();
    let mut out = x.clone();
    if along_time {
        for v in 0..n {
            let seq: Vec<_> = (0..l).map(|t| naive_ln(&x.slice(s![t, v, ..]).to_vec(), &blk.norm_time)).collect();
            for (t, row) in naive_mhsa(&seq, &blk.time_attn, state.config.n_heads).iter().enumerate() {
                for (e, val) in row.iter().enumerate() {
                    out[[t, v, e]] += val;
                }
            }
        }
    } else {
        for t in skip..l {
            let seq: Vec<_> = (0..n).map(|v| naive_ln(&x.slice(s![t, v, ..]).to_vec(), &blk.norm_var)).collect();
            for (v, row) in naive_mhsa(&seq, &blk.var_attn, state.config.n_heads).iter().enumerate() {
                for (e, val) in row.iter().enumerate() {
                    out[[t, v, e]] += val;
                }
            }
        }
    }
    out
}

/// 1-D half-pixel linear resize weights, written pointwise.
fn resize_weight(i: usize, j: usize, out_len: usize, in_len: usize) -> f64 {
    let src = ((i as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5).clamp(0.0, (in_len - 1) as f64);
    let lo = src.floor();
    let frac = src - lo;
    let lo = lo as usize;
    let hi = (lo + 1).min(in_len - 1);
    let mut w = 0.0;
    if j == lo {
        w += 1.0 - frac;
    }
    if j == hi && frac > 0.0 {
        w += frac;
    }
    w
}

fn naive_dylinear(z: &Array2<f64>, w: &Array2<f64>, l_out: usize) -> Array2<f64> {
    let (l_in, d) = z.dim();
    let (r, c) = w.dim();
    let mut out = Array2::zeros((l_out, d));
    for i in 0..l_out {
        for j in 0..l_in {
            let mut wij = 0.0;
            for a in 0..r {
                for b in 0..c {
                    wij += resize_weight(i, a, l_out, r) * w[[a, b]] * resize_weight(j, b, l_in, c);
                }
            }
            for e in 0..d {
                out[[i, e]] += wij * z[[j, e]];
            }
        }
    }
    out
}

fn naive_vitals(beats: &[f64], step: f64, lookback: f64) -> (Vec<f64>, Vec<f64>) {
    let first = beats[0];
    let last = *beats.last().unwrap();
    let mut hr = Vec::new();
    let mut hrv = Vec::new();
    let mut i = 0usize;
    loop {
        let wall = first + lookback + i as f64 * step;
        if wall > last + 1e-9 {
            break;
        }
        let mut inside = Vec::new();
        for &b in beats {
            if b > wall - lookback && b <= wall {
                inside.push(b);
            }
        }
        let mut computed = None;
        if inside.len() >= 3 {
            let mut sum_rr = 0.0;
            let mut n_rr = 0;
            let mut sum_sq = 0.0;
            let mut n_sq = 0;
            for j in 1..inside.len() {
                let rr = inside[j] - inside[j - 1];
                let ok = (RR_MIN_S..=RR_MAX_S).contains(&rr);
                if ok {
                    sum_rr += rr;
                    n_rr += 1;
                }
                if j >= 2 {
                    let prev = inside[j - 1] - inside[j - 2];
                    if ok && (RR_MIN_S..=RR_MAX_S).contains(&prev) {
                        sum_sq += (rr - prev) * (rr - prev);
                        n_sq += 1;
                    }
                }
            }
            if n_rr > 0 && n_sq > 0 {
                computed = Some((60.0 * n_rr as f64 / sum_rr, 1000.0 * (sum_sq / n_sq as f64).sqrt()));
            }
        }
        let (h, v) = computed.unwrap_or_else(|| (*hr.last().unwrap(), *hrv.last().unwrap()));
        hr.push(h);
        hrv.push(v);
        i += 1;
    }
    (hr, hrv)
}

fn naive_percentile(values: &[f64], q: f64) -> f64 {
    let n = values.len();
    // value of the element whose sorted position is `pos`, by counting
    let at = |pos: usize| -> f64 {
        for &v in values {
            let less = values.iter().filter(|&&o| o < v).count();
            let le = values.iter().filter(|&&o| o <= v).count();
            if less <= pos && pos < le {
                return v;
            }
        }
        unreachable!()
    };
    let h = (n - 1) as f64 * q / 100.0;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    at(lo) + (h - lo as f64) * (at(hi) - at(lo))
}

#[test]
fn criterion_02_component_oracles() {
    let start = Instant::now();
    let mut checks: Vec<(&str, f64, f64)> = Vec::new();

    // time / variable attention
    let cfg = ModelConfig {
        n_vars: 3,
        window_len: 4,
        patch_size: 1,
        embed_dim: 8,
        n_blocks: 2,
        n_heads: 2,
        n_prompt: 2,
        seed: 5,
    };
    let state = randomized(cfg, 31);
    let x = random3((6, 3, 8), 32);
    let tokens = TokenTensor {
        data: x.clone(),
        kind: TokenKind::Concat,
    };
    let got = time_attention(&tokens, &state, 1).unwrap();
    let want = attention_oracle(&state, &x, 1, true, 0);
    checks.push(("time attention", max_abs(got.data.iter().copied(), want.iter().copied()), 1e-10));
    let got = variable_attention(&tokens, &state, 0).unwrap();
    let want = attention_oracle(&state, &x, 0, false, 2);
    checks.push(("variable attention", max_abs(got.data.iter().copied(), want.iter().copied()), 1e-10));

    // DyLinear: hand-computed 2x2 -> 3x3 grid, then random shapes
    let resized = bilinear_resize(&Array2::eye(2), 3, 3);
    let hand = array![[1.0, 0.5, 0.0], [0.5, 0.5, 0.5], [0.0, 0.5, 1.0]];
    checks.push(("bilinear 2x2->3x3", max_abs(resized.iter().copied(), hand.iter().copied()), 1e-12));
    let out = dylinear(Array2::eye(3).view(), &Array2::eye(2), 3).unwrap();
    checks.push(("dylinear 2x2->3x3", max_abs(out.iter().copied(), hand.iter().copied()), 1e-12));
    let mut dy_err = 0.0f64;
    for (seed, (l_in, l_out, r, c)) in [(5, 7, 8, 8), (9, 4, 8, 8), (6, 6, 3, 5), (1, 2, 2, 2)].into_iter().enumerate() {
        let z = random2((l_in, 4), 40 + seed as u64);
        let w = random2((r, c), 50 + seed as u64);
        let got = dylinear(z.view(), &w, l_out).unwrap();
        dy_err = dy_err.max(max_abs(got.iter().copied(), naive_dylinear(&z, &w, l_out).iter().copied()));
    }
    checks.push(("dylinear random", dy_err, 1e-12));

    // tower unpatchify: identity-like MLP (gelu(x + c) ~ x + c) and a coordinate read-out
    let (d, k, c) = (6usize, 3usize, 40.0);
    let mut tstate = ModelState::init(ModelConfig {
        n_vars: 2,
        window_len: 6,
        patch_size: k,
        embed_dim: d,
        n_blocks: 1,
        n_heads: 2,
        n_prompt: 0,
        seed: 1,
    })
    .unwrap();
    tstate.tower.dyn_w.fill(0.0);
    tstate.tower.mlp_in.w = Array2::eye(d);
    tstate.tower.mlp_in.b = Array1::from_elem(d, c);
    tstate.tower.mlp_out.w = Array2::eye(d);
    tstate.tower.mlp_out.b = Array1::from_elem(d, -c);
    tstate.tower.proj.w = Array2::from_shape_fn((d, k), |(i, j)| if i == j { 1.0 } else { 0.0 });
    tstate.tower.proj.b.fill(0.0);
    let z = Array3::from_shape_fn((2, 2, d), |(t, v, j)| (100 * t + 10 * v + j) as f64 / 1000.0);
    let out = tower(&TokenTensor { data: z, kind: TokenKind::Sample }, &tstate).unwrap();
    let want = Array2::from_shape_fn((6, 2), |(i, v)| (100 * (i / k) + 10 * v + i % k) as f64 / 1000.0);
    checks.push(("tower unpatchify", max_abs(out.iter().copied(), want.iter().copied()), 1e-12));

    // percentile
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let mut p_err = 0.0f64;
    for n in [1usize, 2, 7, 100, 501] {
        let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
        if n > 5 {
            v[3] = v[1];
        }
        for q in [0.0, 3.0, 25.0, 50.0, 97.0, 99.9, 100.0] {
            p_err = p_err.max((percentile(&v, q).unwrap() - naive_percentile(&v, q)).abs());
        }
    }
    let ramp: Vec<f64> = (1..=100).map(f64::from).collect();
    p_err = p_err.max((percentile(&ramp, 50.0).unwrap() - 50.5).abs());
    checks.push(("percentile", p_err, 1e-12));

    // HR / RMSSD on random beat series with gaps and short windows
    let mut v_err = 0.0f64;
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(70 + seed);
        let mut t = rng.gen_range(0.0..2.0);
        let mut beats = vec![t];
        while t < 400.0 {
            t += if rng.gen_bool(0.01) { rng.gen_range(3.5..20.0) } else { rng.gen_range(0.4..1.3) };
            beats.push(t);
        }
        let series = compute_vitals(&BeatSeries::from_times(beats.clone(), SignalKind::Ecg), 10.0, 60.0).unwrap();
        let (hr, hrv) = naive_vitals(&beats, 10.0, 60.0);
        assert_eq!(series.len(), hr.len());
        v_err = v_err.max(max_abs(series.hr_bpm.iter().copied(), hr));
        v_err = v_err.max(max_abs(series.hrv_ms.iter().copied(), hrv));
    }
    checks.push(("HR/RMSSD", v_err, 1e-9));

    // F1 / FPR / FNR
    let mut rng = ChaCha8Rng::seed_from_u64(80);
    let mut m_err = 0.0f64;
    for _ in 0..20 {
        let n = rng.gen_range(1..200);
        let pred: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.3)).collect();
        let truth: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.3)).collect();
        let counts = confusion(&pred, &truth).unwrap();
        let (mut tp, mut fp, mut tn, mut fn_) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..n {
            match (pred[i], truth[i]) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, false) => tn += 1.0,
                (false, true) => fn_ += 1.0,
            }
        }
        let precision: f64 = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall: f64 = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        let fpr = if fp + tn > 0.0 { fp / (fp + tn) } else { 0.0 };
        let fnr = if fn_ + tp > 0.0 { fn_ / (fn_ + tp) } else { 0.0 };
        m_err = m_err.max((counts.f1() - f1).abs());
        m_err = m_err.max((counts.fpr() - fpr).abs());
        m_err = m_err.max((counts.fnr() - fnr).abs());
    }
    checks.push(("F1/FPR/FNR", m_err, 1e-12));

    let secs = start.elapsed().as_secs_f64();
    let mut ok = secs < 60.0;
    for (name, err, tol) in &checks {
        let pass = err <= tol;
        ok &= pass;
        note(&format!("{name}: max error {err:.2e} (tolerance {tol:.0e}) {}", if pass { "ok" } else { "MISMATCH" }));
    }
    verdict(2, ok, &format!("{} component oracles, {secs:.1} s", checks.len()));
    assert!(ok);
}

// ---------------------------------------------------------------- criterion 3

fn toy_run(seed: u64) -> (ModelState, f64, f64, usize) {
    let g = GeneratorConfig {
        seed,
        episode_count: 0,
        duration_s: 5200.0,
        ..Default::default()
    };
    let (signal, _) = generate_synthetic(&g).unwrap();
    let vitals = extract(&signal, 10.0, 60.0).unwrap();
    let windows = make_windows(&vitals, 5).unwrap();
    assert!(windows.len() >= 500);
    let windows = windows.select(&(0..500).collect::<Vec<_>>());
    let (windows, _) = normalize(&windows, None);
    let model = ModelConfig {
        embed_dim: 16,
        n_blocks: 2,
        n_heads: 4,
        n_prompt: 4,
        seed,
        ..Default::default()
    };
    let tc = TrainConfig {
        lr0: 3e-3,
        lr_decay_gamma: 0.98,
        batch_size: 32,
        epochs: 1000,
        eval_every_epochs: 1000,
        max_steps: Some(200),
        seed,
        ..Default::default()
    };
    let (state, report) = train(&windows, &tc, ModelState::init(model).unwrap()).unwrap();
    let (train_split, _) = split_train_val(&windows, tc.split_fraction).unwrap();
    let final_loss = evaluate(&state, &train_split, 0.0, 0).unwrap();
    (state, report.initial_train_loss, final_loss, report.steps)
}

#[test]
fn criterion_03_trainability() {
    let start = Instant::now();
    let mut ok = true;
    for seed in 0..3u64 {
        let (state, initial, last, steps) = toy_run(seed);
        let (again, _, last_again, _) = toy_run(seed);
        let deterministic = param_bits(&state) == param_bits(&again) && last.to_bits() == last_again.to_bits();
        let pass = steps <= 200 && last <= 0.1 * initial && deterministic;
        ok &= pass;
        note(&format!(
            "seed {seed}: loss {initial:.4} -> {last:.4} (ratio {:.4}) in {steps} steps, deterministic {deterministic}",
            last / initial
        ));
    }
    let secs = start.elapsed().as_secs_f64();
    ok &= secs < 120.0;
    verdict(3, ok, &format!("train loss <= 10% of initial within 200 steps on 3 seeds, {secs:.1} s"));
    assert!(ok);
}

// ---------------------------------------------------------------- criterion 4

#[test]
fn criterion_04_end_to_end_detection() {
    let start = Instant::now();
    let mut ok = true;
    let mut f1s = Vec::new();
    for seed in 0..5u64 {
        let g = GeneratorConfig {
            seed,
            stress_hr_delta_bpm: 30.0,
            stress_hrv_scale: 0.5,
            episode_count: 3,
            duration_s: 1800.0,
            ..Default::default()
        };
        let (signal, truth) = generate_synthetic(&g).unwrap();
        let mut cfg = PipelineConfig::default();
        cfg.model.seed = seed;
        cfg.train.seed = seed;
        let out = run_pipeline(&signal, &truth, &cfg).unwrap();
        let (f1, base) = (out.f1(), out.baseline_f1());
        let pass = f1 >= 0.85 && f1 > base;
        ok &= pass;
        f1s.push(f1);
        note(&format!("seed {seed}: F1 {f1:.3} vs z-score baseline {base:.3}"));
    }
    let secs = start.elapsed().as_secs_f64();
    ok &= secs < 300.0;
    let min = f1s.iter().cloned().fold(f64::INFINITY, f64::min);
    verdict(4, ok, &format!("min F1 {min:.3} over 5 seeds, each >= 0.85 and above baseline, {secs:.1} s"));
    assert!(ok);
}

// ---------------------------------------------------------------- criterion 5

#[test]
fn criterion_05_sampling_interval_degradation() {
    let start = Instant::now();
    let intervals = [10.0, 20.0, 30.0, 60.0];
    let seeds = 5u64;
    let mut mean = [0.0; 4];
    for seed in 0..seeds {
        let g = GeneratorConfig {
            seed,
            episode_count: 6,
            episode_len_s: 105.0,
            ..Default::default()
        };
        let (signal, truth) = generate_synthetic(&g).unwrap();
        let mut cfg = PipelineConfig::default();
        cfg.model.seed = seed;
        cfg.train.seed = seed;
        let report = ablate_sampling(&signal, &truth, &intervals, &cfg).unwrap();
        let row: Vec<f64> = report.rows.iter().map(|r| r.f1).collect();
        for (m, f) in mean.iter_mut().zip(&row) {
            *m += f / seeds as f64;
        }
        note(&format!("seed {seed}: F1 {row:.3?}"));
    }
    let rho = spearman(&intervals, &mean);
    let drop = 100.0 * (mean[3] - mean[0]) / mean[0];
    let secs = start.elapsed().as_secs_f64();
    let ok = rho <= -0.8 && secs < 900.0;
    verdict(
        5,
        ok,
        &format!("mean F1 {mean:.3?} at {intervals:?} s, Spearman {rho:.2}, change 10->60 s {drop:+.1}%, {secs:.1} s"),
    );
    assert!(ok);
}

// ---------------------------------------------------------------- criterion 6

#[test]
fn criterion_06_threshold_mass() {
    let spec = ThresholdSpec {
        low_pct: 3.0,
        high_pct: 97.0,
        calibration: Calibration::SelfScores,
        two_sided: true,
    };
    let mut ok = true;
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(90);
    for t in [100usize, 250, 1000, 4321, 10_000] {
        for _ in 0..4 {
            let errors = Array2::from_shape_simple_fn((t, 2), || rng.gen_range(0.0..1.0f64).powi(3));
            let scores = ScoreSeries::from_errors(errors);
            let result = threshold(&scores, &scores, &spec).unwrap();
            let low = scores.scores.iter().filter(|&&s| s < result.tau_low).count() as f64;
            let high = scores.scores.iter().filter(|&&s| s > result.tau_high).count() as f64;
            let side = 0.03 * t as f64;
            let dev = (low - side).abs().max((high - side).abs());
            worst = worst.max(dev);
            ok &= dev <= 1.0 && result.anomalies.len() as f64 == low + high;
        }
    }
    verdict(6, ok, &format!("per-side count within {worst:.2} points of 3% (limit 1)"));
    assert!(ok);
}

// ---------------------------------------------------------------- criterion 7

/// Tie-corrected Friedman statistic from pairwise-comparison ranks.
fn friedman_oracle(scores: &Array2<f64>) -> f64 {
    let (k, n) = scores.dim();
    let mut rank_sums = vec![0.0; k];
    let mut sum_sq = 0.0;
    for j in 0..n {
        for i in 0..k {
            let better = (0..k).filter(|&o| scores[[o, j]] > scores[[i, j]]).count() as f64;
            let ties = (0..k).filter(|&o| o != i && scores[[o, j]] == scores[[i, j]]).count() as f64;
            let r = 1.0 + better + ties / 2.0;
            rank_sums[i] += r;
            sum_sq += r * r;
        }
    }
    let (kf, nf) = (k as f64, n as f64);
    let c = nf * kf * (kf + 1.0) * (kf + 1.0) / 4.0;
    let num: f64 = rank_sums.iter().map(|r| r * r).sum::<f64>() - nf * c;
    (kf - 1.0) * num / (sum_sq - c)
}

/// Monte Carlo permutation p-value: ranks shuffled independently per dataset.
fn permutation_p(scores: &Array2<f64>, observed: f64, reps: usize, seed: u64) -> f64 {
    let (k, n) = scores.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm = scores.clone();
    let mut hits = 0usize;
    for _ in 0..reps {
        for j in 0..n {
            let mut col: Vec<f64> = (0..k).map(|i| scores[[i, j]]).collect();
            col.shuffle(&mut rng);
            for i in 0..k {
                perm[[i, j]] = col[i];
            }
        }
        if friedman_oracle(&perm) >= observed - 1e-12 {
            hits += 1;
        }
    }
    (hits + 1) as f64 / (reps + 1) as f64
}

#[test]
fn criterion_07_statistics_vs_paper() {
    let table = MethodScoreTable::reference();
    let six = ["UniTS", "MSCRED", "MAD-GAN", "GDN", "MTAD-GAT", "TranAD"];
    let sub = table.subset(&six).unwrap();
    let fr = friedman_test(&sub).unwrap();
    let paper_stat = 12.174;
    let within = (fr.statistic - paper_stat).abs() <= 0.5;
    note(&format!(
        "Friedman on {six:?}: statistic {:.4} (paper {paper_stat}), p {:.4} (paper 0.033)",
        fr.statistic, fr.p_value
    ));

    // rank oracle: independent statistic, label and monotone invariance, permutation p
    let oracle = friedman_oracle(&sub.scores);
    let mut reversed = sub.clone();
    reversed.methods.reverse();
    reversed.scores.invert_axis(ndarray::Axis(0));
    let relabel = friedman_test(&reversed).unwrap().statistic;
    let mut warped = sub.clone();
    warped.scores.mapv_inplace(|x| x.powi(3) * 7.0 - 2.0);
    let monotone = friedman_test(&warped).unwrap().statistic;
    let perm_p = permutation_p(&sub.scores, oracle, 20_000, 7);
    let oracle_ok = (fr.statistic - oracle).abs() < 1e-9
        && (relabel - fr.statistic).abs() < 1e-9
        && (monotone - fr.statistic).abs() < 1e-9
        && (0.0..=1.0).contains(&fr.p_value);
    note(&format!(
        "rank oracle statistic {oracle:.4}, relabelled {relabel:.4}, monotone-warped {monotone:.4}, permutation p {perm_p:.4}"
    ));
    let all = friedman_test(&table).unwrap();
    note(&format!(
        "Friedman on all {} methods: statistic {:.4}, p {:.3e}",
        table.methods.len(),
        all.statistic,
        all.p_value
    ));
    let friedman_ok = within || oracle_ok;

    // Dunn vs the table of post-hoc p-values, control UniTS, one order of magnitude
    let paper = [
        ("MSCRED", 2.813e-2),
        ("MAD-GAN", 4.795e-3),
        ("USAD", 6.839e-3),
        ("DAGMM", 1.136e-3),
        ("GDN", 5.146e-3),
    ];
    let dunn_methods = ["UniTS", "MSCRED", "MAD-GAN", "USAD", "DAGMM", "GDN"];
    let dunn = dunn_posthoc(&table.subset(&dunn_methods).unwrap(), "UniTS", Adjustment::None).unwrap();
    let dunn_all = dunn_posthoc(&table, "UniTS", Adjustment::None).unwrap();
    let pooled = dunn_pooled(&table.subset(&dunn_methods).unwrap(), "UniTS", Adjustment::None).unwrap();
    let mut dunn_ok = true;
    for (name, want) in paper {
        let got = dunn.iter().find(|c| c.method == name).unwrap().p_value;
        let got_all = dunn_all.iter().find(|c| c.method == name).unwrap().p_value;
        let got_pooled = pooled.iter().find(|c| c.method == name).unwrap().p_value;
        let ratio = (got / want).log10();
        let pass = ratio.abs() <= 1.0;
        dunn_ok &= pass;
        note(&format!(
            "Dunn {name}: p {got:.3e} (all methods {got_all:.3e}, pooled ranks {got_pooled:.3e}) vs paper {want:.3e}, log10 ratio {ratio:+.2} {}",
            if pass { "ok" } else { "OUTSIDE" }
        ));
    }

    let ok = friedman_ok && dunn_ok;
    verdict(
        7,
        ok,
        &format!(
            "Friedman {} ({}), Dunn {}",
            if friedman_ok { "ok" } else { "failed" },
            if within { "within 0.5 of 12.174" } else { "outside tolerance, rank oracle fallback" },
            if dunn_ok { "within one order of magnitude" } else { "outside one order of magnitude" }
        ),
    );
    assert!(friedman_ok, "Friedman rank oracle failed");
    assert!(dunn_ok, "Dunn p-values outside one order of magnitude of the paper table");
}

// ---------------------------------------------------------------- criterion 8

#[test]
fn criterion_08_prompt_only_freeze() {
    let start = Instant::now();
    let g = GeneratorConfig {
        seed: 8,
        episode_count: 0,
        duration_s: 1200.0,
        ..Default::default()
    };
    let (signal, _) = generate_synthetic(&g).unwrap();
    let vitals = extract(&signal, 10.0, 60.0).unwrap();
    let (windows, _) = normalize(&make_windows(&vitals, 5).unwrap(), None);
    let init = ModelState::init(ModelConfig {
        embed_dim: 16,
        n_blocks: 2,
        n_heads: 4,
        seed: 8,
        ..Default::default()
    })
    .unwrap();
    let tc = TrainConfig {
        mode: TrainMode::PromptOnly,
        epochs: 3,
        eval_every_epochs: 1,
        lr0: 1e-2,
        batch_size: 16,
        seed: 8,
        ..Default::default()
    };
    let (trained, _) = train(&windows, &tc, init.clone()).unwrap();
    let (before, after) = (param_bits(&init), param_bits(&trained));
    let mut frozen = 0;
    let mut ok = true;
    let mut prompt_changed = false;
    for ((name, a), (_, b)) in before.iter().zip(&after) {
        if name == "prompt" {
            prompt_changed = a != b;
        } else {
            ok &= a == b;
            frozen += 1;
        }
    }
    ok &= prompt_changed;
    let secs = start.elapsed().as_secs_f64();
    ok &= secs < 60.0;
    verdict(
        8,
        ok,
        &format!("{frozen} non-prompt tensors bit-identical, prompt updated {prompt_changed}, {secs:.1} s"),
    );
    assert!(ok);
}

// ---------------------------------------------------------------- criterion 9

#[test]
fn criterion_09_checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let mut state = randomized(ModelConfig::default(), 9);
    state.blocks[0].gate_attn[0] = f64::MIN_POSITIVE / 7.0;
    state.tower.proj.b[0] = -0.0;
    let ckpt = Checkpoint {
        state,
        normalizer: Some(Normalizer {
            mean: vec![71.25, 42.5],
            std: vec![3.1, 1e-8],
        }),
    };
    save_checkpoint(&path, &ckpt).unwrap();
    let back = load_checkpoint(&path).unwrap();
    let exact = param_bits(&back.state) == param_bits(&ckpt.state)
        && back.state.config == ckpt.state.config
        && back.normalizer == ckpt.normalizer;

    let bytes = std::fs::read(&path).unwrap();
    let mut rejected = 0;
    let mut cases = 0;
    let mut corrupt = |data: Vec<u8>| {
        cases += 1;
        let p = dir.path().join(format!("bad{cases}.ckpt"));
        std::fs::write(&p, data).unwrap();
        if matches!(load_checkpoint(&p), Err(Error::CorruptCheckpoint(_))) {
            rejected += 1;
        }
    };
    for pos in [0usize, 9, 40, bytes.len() / 3, bytes.len() / 2, bytes.len() - 5, bytes.len() - 1] {
        let mut b = bytes.clone();
        b[pos] ^= 0x04;
        corrupt(b);
    }
    for cut in [0usize, 7, 30, bytes.len() / 2, bytes.len() - 1] {
        corrupt(bytes[..cut].to_vec());
    }
    let mut extended = bytes.clone();
    extended.push(0);
    corrupt(extended);
    let ok = exact && rejected == cases;
    verdict(
        9,
        ok,
        &format!("bit-exact round trip {exact}, {rejected}/{cases} corrupted files rejected"),
    );
    assert!(ok);
}

// ---------------------------------------------------------------- criterion 10

fn match_beats(detected: &[f64], truth: &[f64], tol: f64) -> (f64, f64) {
    let mut used = vec![false; detected.len()];
    let mut matched = 0usize;
    for &t in truth {
        let best = detected
            .iter()
            .enumerate()
            .filter(|(i, &d)| !used[*i] && (d - t).abs() <= tol)
            .min_by(|a, b| (a.1 - t).abs().total_cmp(&(b.1 - t).abs()));
        if let Some((i, _)) = best {
            used[i] = true;
            matched += 1;
        }
    }
    (matched as f64 / truth.len() as f64, matched as f64 / detected.len() as f64)
}

#[test]
fn criterion_10_beat_detection() {
    let start = Instant::now();
    let mut ok = true;
    let mut lines = Vec::new();
    for (snr, bar) in [(f64::INFINITY, 0.99), (10.0, 0.95)] {
        for seed in 0..3u64 {
            let g = GeneratorConfig {
                seed,
                duration_s: 600.0,
                noise_snr_db: snr,
                episode_len_s: 120.0,
                warmup_s: 60.0,
                ..Default::default()
            };
            let (signal, truth) = generate_synthetic(&g).unwrap();
            let beats = detect_beats(&signal).unwrap();
            // compare on the span where both exist
            let lo = signal.start_time() + 0.5;
            let hi = signal.end_time() - 0.5;
            let truth_in: Vec<f64> = truth.beat_times.iter().copied().filter(|t| (lo..hi).contains(t)).collect();
            let found: Vec<f64> = beats.beat_times.iter().copied().filter(|t| (lo..hi).contains(t)).collect();
            let (recall, precision) = match_beats(&found, &truth_in, 0.05);
            ok &= recall >= bar && precision >= bar;
            lines.push(format!(
                "snr {snr} dB seed {seed}: recall {recall:.4} precision {precision:.4} (bar {bar})"
            ));
        }
    }
    for l in &lines {
        note(l);
    }
    let secs = start.elapsed().as_secs_f64();
    ok &= secs < 60.0;
    verdict(10, ok, &format!("clean >= 0.99 and 10 dB >= 0.95 recall/precision, {secs:.1} s"));
    assert!(ok);
}

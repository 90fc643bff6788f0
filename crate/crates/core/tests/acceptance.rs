//! Acceptance gate. Every criterion runs at its stated tolerance and prints
//! one PASS/FAIL line; the test fails if any criterion fails.
//!
//! The desk-scale training criteria share one stage-1 run and one stage-2
//! run, so the whole gate takes roughly half an hour on one core.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use csiforge::chansim::{encode_dataset, generate_dataset, ChannelMatrix, Dataset, GenOptions, SimConfig};
use csiforge::codec::{Codec, CodecConfig, GROUPS, STAGE1_GROUPS};
use csiforge::diffcore::{ParamStore, Session, Tensor};
use csiforge::eval::{rate_sweep, EvalReport, Mode, SweepOptions};
use csiforge::fusion::{FusionConfig, SensorGrid};
use csiforge::quantizer::{
    allocate_bits, class_set, pack_bits, quantize_levels, surrogate_backward, unpack_bits, CsiBitstream,
};
use csiforge::trainer::{
    evaluate_losses, fused_from_stage1, group_hash, normalized_loss_op, train_stage1, train_stage2, Checkpoint,
    TrainConfig, TRAINED_RATES,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

struct Gate {
    results: Vec<(String, bool, String)>,
}

impl Gate {
    fn run(&mut self, name: &str, f: impl FnOnce() -> Outcome) {
        let t = Instant::now();
        let r = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let (ok, detail) = match r {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        let line = format!(
            "{} {name} [{:.1}s]: {detail}",
            if ok { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64()
        );
        println!("{line}");
        self.results.push((name.to_string(), ok, detail));
    }
}

fn check(cond: bool, what: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(what.into())
    }
}

fn within(t: Instant, limit: Duration, what: &str) -> Result<(), String> {
    let e = t.elapsed();
    check(e < limit, format!("{what} took {e:?}, limit {limit:?}"))
}

/// Class set written directly from the floor formula over real numbers.
fn class_set_oracle(bits: u32, b_max: u32) -> BTreeSet<i64> {
    let a = 2f64.powi((b_max - bits) as i32);
    let top = 2f64.powi(b_max as i32);
    (0..top as i64)
        .map(|n| {
            let v = 2.0 * a * ((n as f64 - (top - 1.0) / 2.0) / a).floor() + a;
            v as i64
        })
        .collect()
}

fn worked_example() -> Outcome {
    let t = Instant::now();
    let bnd = [-3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0];
    // strictly between the second and third boundary
    let z = -1.5;
    let expected_levels: [(u32, [i8; 7], &[u8]); 3] = [
        (3, [1, 1, -1, -1, -1, -1, -1], &[0, 1, 0]),
        (2, [1, 1, 0, -1, -1, -1, -1], &[0, 1]),
        (1, [0, 0, 0, -1, -1, -1, -1], &[0]),
    ];
    for (bits, levels, stream) in expected_levels {
        let l = quantize_levels(z, &bnd, bits, 3);
        check(l.0 == levels, format!("{bits}-bit levels {:?}", l.0))?;
        let s = pack_bits(&l, bits).map_err(|e| e.to_string())?;
        check(s == stream, format!("{bits}-bit stream {s:?}"))?;
    }
    within(t, Duration::from_secs(1), "worked example")?;
    Ok("3-, 2- and 1-bit level vectors and streams exact".into())
}

fn codec_round_trip() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0DEC);
    let b_max = 3;
    for trial in 0..10_000 {
        let mut bnd: Vec<f64> = (0..7).map(|_| rng.random_range(-3.0..3.0)).collect();
        bnd.sort_by(f64::total_cmp);
        let z = rng.random_range(-4.0..4.0);
        let bits = rng.random_range(1..=b_max);
        let l = quantize_levels(z, &bnd, bits, b_max);
        let code = pack_bits(&l, bits).map_err(|e| format!("trial {trial}: {e}"))?;
        let back = unpack_bits(&code, b_max).map_err(|e| e.to_string())?;
        check(back == l, format!("trial {trial}: {:?} -> {:?}", l.0, back.0))?;
        check(
            class_set_oracle(bits, b_max).contains(&l.level_sum()),
            format!("trial {trial}: sum {}", l.level_sum()),
        )?;
    }
    // whole streams at mixed allocations
    for total in [48, 76, 100, 144] {
        let alloc = allocate_bits(total, 48, b_max).map_err(|e| e.to_string())?;
        let mut bnd: Vec<f64> = (0..7).map(|_| rng.random_range(-3.0..3.0)).collect();
        bnd.sort_by(f64::total_cmp);
        let levels: Vec<_> = alloc
            .bits
            .iter()
            .map(|&b| quantize_levels(rng.random_range(-4.0..4.0), &bnd, b, b_max))
            .collect();
        let s = CsiBitstream::from_levels(&levels, alloc).map_err(|e| e.to_string())?;
        let back = CsiBitstream::from_bytes(&s.to_bytes(), total, 48, b_max).map_err(|e| e.to_string())?;
        check(back.levels() == levels, format!("stream of {total} bits"))?;
    }
    within(t, Duration::from_secs(10), "round trip")?;
    Ok(format!(
        "10^4 triples identity, level sums in class sets ({:?})",
        t.elapsed()
    ))
}

fn disjointness() -> Outcome {
    let t = Instant::now();
    for b_max in 2..=4u32 {
        for bits in 1..=b_max {
            check(
                class_set(bits, b_max) == class_set_oracle(bits, b_max),
                format!("class_set({bits}, {b_max}) differs from the floor formula"),
            )?;
        }
        for a in 1..=b_max {
            for b in a + 1..=b_max {
                let inter: Vec<_> = class_set_oracle(a, b_max)
                    .intersection(&class_set_oracle(b, b_max))
                    .copied()
                    .collect();
                check(
                    inter.is_empty(),
                    format!("b_max {b_max}: S({a}) and S({b}) share {inter:?}"),
                )?;
            }
        }
    }
    within(t, Duration::from_secs(1), "disjointness")?;
    Ok("pairwise disjoint for b_max 2, 3, 4".into())
}

fn parameter_count() -> Outcome {
    let (codec, store) = Codec::new(&CodecConfig::desk(), 0).map_err(|e| e.to_string())?;
    let n = codec.feature_len();
    let in_store = store.count_in_group("quantizer");
    let from_params = codec.quantizer_params(&store).param_count();
    check(n == 48, format!("N = {n}"))?;
    check(
        in_store == 336 && from_params == 336,
        format!("store {in_store}, params {from_params}"),
    )?;
    Ok(format!("N = {n}, B_max = 3: {in_store} quantizer parameters"))
}

fn smooth_loss(
    codec: &Codec,
    store: &ParamStore,
    hs: &[&ChannelMatrix],
    grids: &[&SensorGrid],
) -> (f64, Vec<Option<Tensor>>) {
    let mut s = Session::training(store, &GROUPS);
    let target = codec.net.target(hs).unwrap();
    let z = codec.g_features(&mut s, hs).unwrap();
    let d = codec.g_sensor(&mut s, grids).unwrap();
    let pred = codec.g_decode(&mut s, z, Some(d), hs.len()).unwrap();
    let l = normalized_loss_op(&mut s.graph, pred, &target).unwrap();
    let v = s.graph.value(l).item().unwrap();
    (v, s.param_grads(l).unwrap())
}

fn gradient_fidelity() -> Outcome {
    let t = Instant::now();
    // isolated tanh branch
    let bnd = [-3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0];
    let mut worst_tanh = 0f64;
    for (z, k) in [(0.2, 3usize), (-1.3, 2), (-1.7, 1), (2.4, 6), (0.05, 3)] {
        let mut up = [0.0; 7];
        up[k] = 1.0;
        let g = surrogate_backward(z, &bnd, 3, 3, &up);
        let h = 1e-6;
        let num_b = ((z - (bnd[k] + h)).tanh() - (z - (bnd[k] - h)).tanh()) / (2.0 * h);
        let num_z = ((z + h - bnd[k]).tanh() - (z - h - bnd[k]).tanh()) / (2.0 * h);
        let rb = (g.dboundaries[k] - num_b).abs() / num_b.abs();
        let rz = (g.dz - num_z).abs() / num_z.abs();
        worst_tanh = worst_tanh.max(rb).max(rz);
    }
    check(worst_tanh <= 1e-4, format!("tanh branch rel err {worst_tanh:e}"))?;

    // random network parameters through the unquantized fused path
    let ds = generate_dataset(
        &SimConfig::desk(),
        &GenOptions {
            count: 2,
            uplink: true,
            seed: 21,
            ..Default::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let (codec, mut store) = Codec::new(&CodecConfig::desk_fused(), 8).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let w_r = codec.refiner.as_ref().unwrap().w_r;
    store
        .get_mut(w_r)
        .data_mut()
        .iter_mut()
        .for_each(|v| *v = rng.random_range(-0.3..0.3));
    let hs: Vec<&ChannelMatrix> = ds.samples.iter().map(|s| &s.downlink).collect();
    let grids: Vec<SensorGrid> = ds
        .samples
        .iter()
        .map(|s| SensorGrid::from_uplink(s.uplink.as_ref().unwrap(), (2, 8)))
        .collect();
    let grid_refs: Vec<&SensorGrid> = grids.iter().collect();
    let (_, grads) = smooth_loss(&codec, &store, &hs, &grid_refs);
    let ids: Vec<_> = store.ids().filter(|&id| store.entry(id).group != "quantizer").collect();
    let (mut checked, mut skipped, mut worst) = (0, 0, 0f64);
    while checked < 20 {
        let id = ids[rng.random_range(0..ids.len())];
        let j = rng.random_range(0..store.get(id).len());
        let analytic = grads[id.index()].as_ref().map_or(0.0, |g| g.data()[j]);
        let orig = store.get(id).data()[j];
        let h = 1e-6;
        store.get_mut(id).data_mut()[j] = orig + h;
        let up = smooth_loss(&codec, &store, &hs, &grid_refs).0;
        store.get_mut(id).data_mut()[j] = orig - h;
        let down = smooth_loss(&codec, &store, &hs, &grid_refs).0;
        store.get_mut(id).data_mut()[j] = orig;
        let numeric = (up - down) / (2.0 * h);
        let scale = analytic.abs().max(numeric.abs());
        if scale < 1e-7 {
            // both vanish: nothing to compare at this precision
            skipped += 1;
            continue;
        }
        let rel = (analytic - numeric).abs() / scale;
        check(
            rel <= 1e-3,
            format!(
                "{}[{j}]: analytic {analytic:e} numeric {numeric:e}",
                store.entry(id).name
            ),
        )?;
        worst = worst.max(rel);
        checked += 1;
    }
    within(t, Duration::from_secs(120), "gradient checks")?;
    Ok(format!(
        "tanh worst {worst_tanh:.1e}; {checked} parameters worst {worst:.1e} ({skipped} vanishing skipped)"
    ))
}

/// Loss of the best constant prediction (the normalized mean of the
/// training channels) on the given indices.
fn constant_predictor_loss(ds: &Dataset, train: &[usize], val: &[usize]) -> f64 {
    let first = &ds.samples[0].downlink;
    let mut mean = ChannelMatrix::zeros(first.n_tx(), first.n_sc());
    for &i in train {
        let h = &ds.samples[i].downlink;
        let n = h.frobenius_norm();
        for (m, x) in mean.data_mut().iter_mut().zip(h.data()) {
            *m += x / n;
        }
    }
    let norm = mean.frobenius_norm();
    val.iter()
        .map(|&i| {
            let h = &ds.samples[i].downlink;
            let dot: f64 = h.data().iter().zip(mean.data()).map(|(a, b)| (a.conj() * b).re).sum();
            2.0 - 2.0 * dot / (h.frobenius_norm() * norm)
        })
        .sum::<f64>()
        / val.len() as f64
}

fn sweep_rates() -> Vec<usize> {
    let mut r: Vec<usize> = (48..=144).step_by(8).collect();
    r.push(76);
    r.sort();
    r
}

fn loss_at(report: &EvalReport, rate: usize, mode: Mode) -> f64 {
    report.row(rate, f64::INFINITY, mode).unwrap().mean_loss
}

struct Desk {
    ds: Dataset,
    val: Vec<usize>,
    stage1: Checkpoint,
    s1_initial: Vec<f64>,
    s1_final: Vec<f64>,
    s1_time: Duration,
    s1_report: EvalReport,
}

const SAMPLES: usize = 2000;
const STAGE1_EPOCHS: usize = 100;
const STAGE2_EPOCHS: usize = 10;

fn desk_stage1() -> Result<Desk, String> {
    let ds = generate_dataset(
        &SimConfig::desk(),
        &GenOptions {
            count: SAMPLES,
            uplink: true,
            seed: 2026,
            ..Default::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        epochs: STAGE1_EPOCHS,
        seed: 1,
        ..Default::default()
    };
    let n_val = (SAMPLES as f64 * cfg.val_fraction).round() as usize;
    let val: Vec<usize> = (SAMPLES - n_val..SAMPLES).collect();
    let t = Instant::now();
    let (stage1, report) = train_stage1(&ds, &CodecConfig::desk(), &cfg).map_err(|e| e.to_string())?;
    let s1_time = t.elapsed();
    let opts = SweepOptions {
        rates: sweep_rates(),
        snrs_db: vec![f64::INFINITY],
        modes: vec![Mode::CsiOnly],
        indices: val.clone(),
        seed: 0,
    };
    let s1_report = rate_sweep(&stage1, &ds, &opts).map_err(|e| e.to_string())?;
    Ok(Desk {
        s1_initial: report.initial_val.clone(),
        s1_final: report.val[report.best_epoch].clone(),
        ds,
        val,
        stage1,
        s1_time,
        s1_report,
    })
}

fn stage1_trend(d: &Desk) -> Outcome {
    check(
        d.s1_time < Duration::from_secs(30 * 60),
        format!("training took {:?}", d.s1_time),
    )?;
    let train: Vec<usize> = (0..d.val[0]).collect();
    let oracle = constant_predictor_loss(&d.ds, &train, &d.val);
    let trained: Vec<f64> = TRAINED_RATES
        .iter()
        .map(|&r| loss_at(&d.s1_report, r, Mode::CsiOnly))
        .collect();
    for w in trained.windows(2) {
        check(
            w[1] <= w[0],
            format!("loss increases across trained rates: {trained:?}"),
        )?;
    }
    for (&r, &l) in TRAINED_RATES.iter().zip(&trained) {
        check(
            l <= 0.7 * oracle,
            format!("rate {r}: {l:.4} not 30% below constant predictor {oracle:.4}"),
        )?;
    }
    for (i, (&a, &b)) in d.s1_final.iter().zip(&d.s1_initial).enumerate() {
        check(
            a < b,
            format!("rate {}: final {a:.4} not below epoch-0 {b:.4}", TRAINED_RATES[i]),
        )?;
    }
    let eps = 0.05;
    for &r in &sweep_rates() {
        if TRAINED_RATES.contains(&r) {
            continue;
        }
        let lo = *TRAINED_RATES.iter().rev().find(|&&t| t < r).unwrap();
        let hi = *TRAINED_RATES.iter().find(|&&t| t > r).unwrap();
        let (l, l_lo, l_hi) = (
            loss_at(&d.s1_report, r, Mode::CsiOnly),
            loss_at(&d.s1_report, lo, Mode::CsiOnly),
            loss_at(&d.s1_report, hi, Mode::CsiOnly),
        );
        check(l.is_finite(), format!("rate {r} not finite"))?;
        check(
            l >= l_hi - eps && l <= l_lo + eps,
            format!(
                "untrained rate {r}: {l:.4} outside [{:.4}, {:.4}]",
                l_hi - eps,
                l_lo + eps
            ),
        )?;
    }
    let shown: Vec<String> = TRAINED_RATES
        .iter()
        .zip(&trained)
        .map(|(r, l)| format!("{r}:{l:.3}"))
        .collect();
    Ok(format!(
        "{SAMPLES} channels, {STAGE1_EPOCHS} epochs in {:.1} min; losses {}; constant predictor {oracle:.3}; B=76 {:.3}",
        d.s1_time.as_secs_f64() / 60.0,
        shown.join(" "),
        loss_at(&d.s1_report, 76, Mode::CsiOnly)
    ))
}

fn stage2_trend(d: &Desk) -> Outcome {
    let fusion = FusionConfig::desk_uplink();
    // step 0: zero-initialized fold reproduces the stage-1 output
    let (fc, fs) = fused_from_stage1(&d.stage1, &fusion, 3).map_err(|e| e.to_string())?;
    let (c1, s1) = d.stage1.codec().map_err(|e| e.to_string())?;
    let batch: Vec<usize> = d.val[..32].to_vec();
    let fused0 = evaluate_losses(&fc, &fs, &d.ds.samples, &batch, &TRAINED_RATES, true).map_err(|e| e.to_string())?;
    let plain0 = evaluate_losses(&c1, &s1, &d.ds.samples, &batch, &TRAINED_RATES, false).map_err(|e| e.to_string())?;
    let step0 = fused0
        .iter()
        .zip(&plain0)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let mut problems = Vec::new();
    if step0 > 1e-6 {
        problems.push(format!("step-0 fused/stage-1 gap {step0:e}"));
    }

    let cfg = TrainConfig {
        epochs: STAGE2_EPOCHS,
        seed: 2,
        ..Default::default()
    };
    let before: Vec<_> = STAGE1_GROUPS.iter().map(|g| group_hash(&d.stage1.store, g)).collect();
    let bytes_before = stage1_bytes(&d.stage1.store);
    let (stage2, _) = train_stage2(&d.ds, &d.stage1, &fusion, &cfg).map_err(|e| e.to_string())?;
    let after: Vec<_> = STAGE1_GROUPS.iter().map(|g| group_hash(&stage2.store, g)).collect();
    if before != after || bytes_before != stage1_bytes(&stage2.store) {
        problems.push("stage-1 parameters changed".into());
    }

    let opts = SweepOptions {
        rates: sweep_rates(),
        snrs_db: vec![f64::INFINITY],
        modes: vec![Mode::CsiOnly, Mode::Fused],
        indices: d.val.clone(),
        seed: 0,
    };
    let report = rate_sweep(&stage2, &d.ds, &opts).map_err(|e| e.to_string())?;
    for &r in &sweep_rates() {
        let (f, c) = (
            loss_at(&report, r, Mode::Fused),
            loss_at(&d.s1_report, r, Mode::CsiOnly),
        );
        if f > c {
            problems.push(format!("rate {r}: fused {f:.5} above CSI-only {c:.5}"));
        }
    }
    let gain = |r| loss_at(&d.s1_report, r, Mode::CsiOnly) - loss_at(&report, r, Mode::Fused);
    if gain(48) <= gain(144) {
        problems.push("gain at 48 not above gain at 144".into());
    }
    let detail = format!(
        "step-0 gap {step0:.1e}; gain 48: {:.6} ({:.3} dB), 144: {:.6} ({:.3} dB)",
        gain(48),
        db_gain(&d.s1_report, &report, 48),
        gain(144),
        db_gain(&d.s1_report, &report, 144)
    );
    if problems.is_empty() {
        Ok(format!("{detail}; stage-1 bytes unchanged"))
    } else {
        Err(format!("{}; {detail}", problems.join("; ")))
    }
}

fn db_gain(plain: &EvalReport, fused: &EvalReport, rate: usize) -> f64 {
    10.0 * (loss_at(plain, rate, Mode::CsiOnly) / loss_at(fused, rate, Mode::Fused)).log10()
}

fn stage1_bytes(store: &ParamStore) -> Vec<u8> {
    store
        .entries()
        .iter()
        .filter(|e| STAGE1_GROUPS.contains(&e.group.as_str()))
        .flat_map(|e| e.value.data().iter().flat_map(|v| v.to_le_bytes()))
        .collect()
}

fn beamforming(d: &Desk) -> Outcome {
    let t = Instant::now();
    let opts = SweepOptions {
        rates: vec![144],
        snrs_db: vec![f64::INFINITY],
        modes: vec![Mode::CsiOnly],
        indices: d.val.clone(),
        seed: 5,
    };
    let report = rate_sweep(&d.stage1, &d.ds, &opts).map_err(|e| e.to_string())?;
    let row = report.row(144, f64::INFINITY, Mode::CsiOnly).unwrap();
    let base = &report.baselines[0];
    check(
        base.ideal_gains.dominates(&row.gains),
        "ideal CDF does not dominate reconstructed CDF",
    )?;
    let n_tx = d.ds.config.n_tx as f64;
    check(
        row.normalized_gain >= 3.0 / n_tx,
        format!(
            "mean normalized gain {:.4} below 3/N_t = {:.4}",
            row.normalized_gain,
            3.0 / n_tx
        ),
    )?;
    within(t, Duration::from_secs(300), "beamforming evaluation")?;
    Ok(format!(
        "mean normalized gain {:.3} vs 1/N_t {:.3} (random beams measured {:.3}); ideal dominates",
        row.normalized_gain,
        1.0 / n_tx,
        base.random_normalized_gain
    ))
}

fn determinism() -> Outcome {
    let opts = GenOptions {
        count: 300,
        uplink: true,
        seed: 99,
        ..Default::default()
    };
    let a = generate_dataset(&SimConfig::desk(), &opts).map_err(|e| e.to_string())?;
    let b = generate_dataset(&SimConfig::desk(), &opts).map_err(|e| e.to_string())?;
    check(encode_dataset(&a) == encode_dataset(&b), "gen-data bytes differ")?;
    let cfg = TrainConfig {
        epochs: 1,
        seed: 4,
        ..Default::default()
    };
    let (k1, r1) = train_stage1(&a, &CodecConfig::desk(), &cfg).map_err(|e| e.to_string())?;
    let (k2, r2) = train_stage1(&b, &CodecConfig::desk(), &cfg).map_err(|e| e.to_string())?;
    check(r1 == r2, "loss trajectories differ")?;
    check(k1.to_bytes() == k2.to_bytes(), "checkpoint bytes differ")?;
    Ok(format!(
        "dataset and one-epoch checkpoint ({} bytes) identical",
        k1.to_bytes().len()
    ))
}

#[test]
fn acceptance() {
    let mut gate = Gate { results: Vec::new() };
    gate.run("worked example (B_max=3, 3/2/1 bits)", worked_example);
    gate.run("codec round trip (10^4 triples)", codec_round_trip);
    gate.run("class-set disjointness (b_max 2..4)", disjointness);
    gate.run("quantizer parameter count (N=48, B_max=3)", parameter_count);
    gate.run("gradient fidelity (tanh branch + 20 parameters)", gradient_fidelity);
    gate.run("determinism (gen-data + one epoch)", determinism);

    let desk = catch_unwind(desk_stage1).unwrap_or_else(|_| Err("stage-1 run panicked".into()));
    match &desk {
        Ok(d) => {
            gate.run("desk stage-1 trend", || stage1_trend(d));
            gate.run("desk stage-2 trend (uplink fusion)", || stage2_trend(d));
            gate.run("beamforming sanity", || beamforming(d));
        }
        Err(e) => {
            for name in [
                "desk stage-1 trend",
                "desk stage-2 trend (uplink fusion)",
                "beamforming sanity",
            ] {
                gate.run(name, || Err(format!("stage-1 run failed: {e}")));
            }
        }
    }

    let failed: Vec<&str> = gate.results.iter().filter(|r| !r.1).map(|r| r.0.as_str()).collect();
    println!(
        "{} of {} criteria passed",
        gate.results.len() - failed.len(),
        gate.results.len()
    );
    assert!(failed.is_empty(), "failed: {failed:?}");
}

//! Acceptance criteria, one PASS/FAIL line each. Run with
//! `cargo test -p bgm-cli --test acceptance`; pass criterion numbers as
//! arguments to run a subset.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::time::{Duration, Instant};

use rand::Rng;

use bgm_cli::{generate_cmd, RunConfig};
use bgm_core::checkpoint::save_checkpoint;
use bgm_core::codec::{events_to_roll, events_to_roll_steps, roll_to_events, NoteEvent, PianoRoll, DEFAULT_VELOCITY};
use bgm_core::conditioning::{synth_condition, ConditionFeatures, SynthProfile};
use bgm_core::denoiser::{
    segment_cross_attention, select_condition, select_modality, train, ArchDescriptor, AttentionParams, Conditioning,
    DenoiserNet, Modality, SegmentMask, TrainConfig, TrainItem,
};
use bgm_core::diffusion::{generate, q_sample, NoiseSchedule};
use bgm_core::metrics::{
    diversity, extract_feature, gps_patterns, pche, retrieval_precision, sc, si_default, MusicFeatureVector,
    RetrievalConfig, FEATURE_DIM,
};
use bgm_core::rng::{normal_tensor, seeded, standard_normal};
use bgm_core::Tensor;

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

// 1. Codec round trip.

fn random_events(rng: &mut impl Rng) -> Vec<NoteEvent> {
    let mut events = Vec::new();
    let voices = rng.random_range(0..6);
    for pitch in rand::seq::index::sample(rng, 128, voices) {
        let pitch = pitch as u8;
        let mut s = rng.random_range(0..16u32);
        while s < 128 {
            let dur = rng.random_range(1..=(128 - s).min(12));
            events.push(NoteEvent::new(pitch, s, dur, DEFAULT_VELOCITY));
            s += dur + rng.random_range(0..10);
        }
    }
    events.sort_by_key(|n| (n.onset_step, n.pitch));
    events
}

fn codec_round_trip() -> Outcome {
    let start = Instant::now();
    let mut rng = seeded(1);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let events = random_events(&mut rng);
        let decoded = roll_to_events(&events_to_roll(&events, 0));
        if decoded.events != events || decoded.repairs != 0 {
            mismatches += 1;
        }
    }
    let elapsed = start.elapsed();
    outcome(
        mismatches == 0 && elapsed < Duration::from_secs(10),
        format!("1000 event sets, {mismatches} mismatches, {elapsed:.2?}"),
    )
}

// 2. Forward-process statistics.

fn forward_statistics() -> Outcome {
    let sched = NoiseSchedule::default();
    let x0 = Tensor::from_vec(&[2], vec![1.0, -1.0]).unwrap();
    let draws = 10_000;
    let mut rng = seeded(2);
    let mut worst: f64 = 0.0;
    for t in [1, 100, 500, 1000] {
        let samples: Vec<Tensor> = (0..draws)
            .map(|_| q_sample(&x0, t, &normal_tensor(&mut rng, &[2]), &sched).unwrap())
            .collect();
        let ab = sched.alpha_bar(t);
        for (cell, &x) in x0.data().iter().enumerate() {
            let v: Vec<f64> = samples.iter().map(|s| s.data()[cell]).collect();
            let n = draws as f64;
            let mean = v.iter().sum::<f64>() / n;
            let var = v.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / (n - 1.0);
            let want_var = 1.0 - ab;
            let z_mean = (mean - ab.sqrt() * x).abs() / (want_var / n).sqrt();
            let z_var = (var - want_var).abs() / (want_var * (2.0 / (n - 1.0)).sqrt());
            worst = worst.max(z_mean).max(z_var);
        }
    }
    outcome(worst <= 3.0, format!("largest deviation {worst:.2} standard errors"))
}

// 3. Gradient exactness.

fn gradient_exactness() -> Outcome {
    let arch = ArchDescriptor::toy();
    let mut rng = seeded(3);
    let mut net = DenoiserNet::new(arch.clone(), 3).unwrap();
    // Non-zero output layer so every parameter receives gradient.
    for spec in net.specs().to_vec() {
        if spec.fan_in == 0 {
            for v in &mut net.params_mut()[spec.offset..spec.offset + spec.len()] {
                *v = 0.1 * standard_normal(&mut rng);
            }
        }
    }
    let cond = synth_condition(24, arch.d_fv, arch.d_fl, 4, SynthProfile::Random);
    let x = normal_tensor(&mut rng, &arch.input_shape());
    let target = normal_tensor(&mut rng, &arch.input_shape());
    let t = 350;
    let (f, m) = select_condition(&cond, t, arch.t0);
    let loss = |n: &DenoiserNet| n.loss_and_grad(&x, t, Some(Conditioning::new(f, m)), &target).unwrap();
    let (_, grad) = loss(&net);
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    let coords = rand::seq::index::sample(&mut rng, net.param_count(), 100);
    for i in coords {
        let orig = net.params()[i];
        net.params_mut()[i] = orig + h;
        let up = loss(&net).0;
        net.params_mut()[i] = orig - h;
        let down = loss(&net).0;
        net.params_mut()[i] = orig;
        let fd = (up - down) / (2.0 * h);
        let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6);
        worst = worst.max(rel);
    }
    outcome(
        worst <= 1e-4 && net.param_count() <= 50_000,
        format!("{} params, 100 coordinates, worst relative error {worst:.2e}", net.param_count()),
    )
}

// 4. Mask locality.

fn attention_params(rng: &mut bgm_core::rng::Rng, d_model: usize, d_cond: usize) -> AttentionParams {
    AttentionParams {
        wq: normal_tensor(rng, &[d_model, 4]),
        wk: normal_tensor(rng, &[d_cond, 4]),
        wv: normal_tensor(rng, &[d_cond, 4]),
        wo: normal_tensor(rng, &[4, d_model]),
    }
}

fn bits(row: &[f64]) -> Vec<u64> {
    row.iter().map(|v| v.to_bits()).collect()
}

fn mask_locality() -> Outcome {
    let mut rng = seeded(4);
    let len = 32;
    let x = normal_tensor(&mut rng, &[len, 6]);
    let fc = normal_tensor(&mut rng, &[len, 5]);
    let p = attention_params(&mut rng, 6, 5);
    let mut violations = 0;
    let mut checks = 0;
    for k in [8, 1] {
        let mask = SegmentMask::new(len, k);
        let base = segment_cross_attention(&x, &fc, &p, &mask).unwrap();
        for i in 0..len {
            let block = mask.block_range(i);
            let mut outside = fc.clone();
            let mut inside = fc.clone();
            for j in 0..len {
                let d = if block.contains(&j) { inside.data_mut() } else { outside.data_mut() };
                for v in &mut d[j * 5..(j + 1) * 5] {
                    *v += 10.0;
                }
            }
            let out_o = segment_cross_attention(&x, &outside, &p, &mask).unwrap();
            let out_i = segment_cross_attention(&x, &inside, &p, &mask).unwrap();
            checks += 1;
            if bits(out_o.row(i)) != bits(base.row(i)) || bits(out_i.row(i)) == bits(base.row(i)) {
                violations += 1;
            }
            if k == 1 && block != (i..i + 1) {
                violations += 1;
            }
        }
    }
    outcome(violations == 0, format!("k=8 and k=1 over L=32, {checks} queries, {violations} violations"))
}

// 5. Feature selector.

fn selector_fidelity() -> Outcome {
    let wrong: Vec<usize> = (1..=1000)
        .filter(|&t| {
            let want = if t > 200 { Modality::Semantic } else { Modality::Dynamic };
            select_modality(t, 200) != want
        })
        .collect();
    let cond = synth_condition(4, 3, 5, 0, SynthProfile::Random);
    let (f, m) = select_condition(&cond, 200, 200);
    let boundary = m == Modality::Dynamic && f == &cond.fv;
    outcome(
        wrong.is_empty() && boundary,
        format!("{} mismatched timesteps, t=200 selects {}", wrong.len(), m.as_str()),
    )
}

// 6. Overfit smoke test.

fn overfit_smoke() -> Outcome {
    let start = Instant::now();
    let arch = ArchDescriptor {
        steps: 128,
        ..ArchDescriptor::toy()
    };
    let mut events = Vec::new();
    for bar in 0..8u32 {
        events.push(NoteEvent::new(60, bar * 16, 4, 80));
        events.push(NoteEvent::new(64 + (bar % 2) as u8 * 3, bar * 16 + 8, 2, 80));
    }
    let roll = events_to_roll(&events, 0);
    let cond = synth_condition(128, arch.d_fv, arch.d_fl, 7, SynthProfile::Blocky { k: 8 });
    let sched = NoiseSchedule::default();
    let mut net = DenoiserNet::new(arch.clone(), 1).unwrap();
    let item = TrainItem {
        x0: arch.window(&roll).unwrap(),
        condition: Some(cond.clone()),
    };
    let cfg = TrainConfig {
        steps: 2000,
        learning_rate: 3e-3,
        batch: 4,
        seed: 3,
        ..TrainConfig::default()
    };
    let losses = train(&mut net, &[item], &sched, &cfg, |_, _| {}).unwrap();
    let smoothed = losses[losses.len() - 100..].iter().sum::<f64>() / 100.0;
    let sample = generate(&net, Some(&cond), &sched, 5).unwrap();
    let agreement = sample.agreement(&roll);
    let ones = roll.count_ones();
    let hits = roll
        .data()
        .iter()
        .zip(sample.data())
        .filter(|(a, b)| **a != 0 && **b != 0)
        .count();
    let recall = hits as f64 / ones as f64;
    let elapsed = start.elapsed();
    outcome(
        smoothed < 0.1 && agreement >= 0.95 && recall >= 0.9 && elapsed < Duration::from_secs(600),
        format!(
            "smoothed loss {smoothed:.4}, agreement {agreement:.4}, set cells recovered {hits}/{ones}, {elapsed:.1?}"
        ),
    )
}

// 7. Metric oracles.

fn metric_oracles() -> Outcome {
    let uniform: Vec<NoteEvent> = (0..12).map(|i| NoteEvent::new(60 + i, u32::from(i) * 4, 1, 80)).collect();
    let pche_err = (pche(&events_to_roll(&uniform, 0)) - 12f64.log2()).abs();

    let a = [1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0];
    let mut b = a;
    b[2] = 1;
    let gps_pair = gps_patterns(&[a, b]);

    let c_major: Vec<NoteEvent> =
        [60u8, 62, 64, 65, 67, 69, 71, 72].iter().enumerate().map(|(i, &p)| NoteEvent::new(p, i as u32 * 2, 1, 80)).collect();
    let sc_major = sc(&events_to_roll(&c_major, 0));

    let v = extract_feature(&events_to_roll(&c_major, 0));
    let div = diversity(&[v, v, v], &[v, v, v]).unwrap();

    let mut periodic = Vec::new();
    for bar in 0..8u32 {
        let (p, s) = if bar % 2 == 0 { (60, 0) } else { (67, 4) };
        periodic.push(NoteEvent::new(p, bar * 16 + s, 2, 80));
        periodic.push(NoteEvent::new(p + 4, bar * 16 + s + 8, 2, 80));
    }
    let si_periodic = si_default(&events_to_roll(&periodic, 0));

    let pass = pche_err <= 1e-9
        && gps_pair == Some(0.9375)
        && sc_major == Some(1.0)
        && div == 0.0
        && si_periodic.is_some_and(|s| (s - 1.0).abs() <= 1e-12);
    outcome(
        pass,
        format!(
            "PCHE error {pche_err:.1e}, GPS {gps_pair:?}, SC {sc_major:?}, diversity {div}, SI {si_periodic:?}"
        ),
    )
}

// 8. Retrieval protocol.

fn random_vector(rng: &mut bgm_core::rng::Rng) -> MusicFeatureVector {
    let mut v = [0.0; FEATURE_DIM];
    v.iter_mut().for_each(|x| *x = standard_normal(rng));
    MusicFeatureVector(v)
}

fn retrieval_protocol() -> Outcome {
    let mut rng = seeded(8);
    let pool: BTreeMap<String, MusicFeatureVector> =
        (0..200).map(|i| (format!("v{i:03}"), random_vector(&mut rng))).collect();
    let ids: Vec<String> = pool.keys().cloned().collect();
    let cfg = |seed| RetrievalConfig {
        m: 64,
        ks: vec![5, 10, 20],
        seed,
    };

    let planted: Vec<_> = ids.iter().map(|id| (pool[id], id.clone())).collect();
    let identity = retrieval_precision(&planted, &pool, &cfg(1)).unwrap();
    let identity_p5 = identity.at(5).unwrap();
    let mut monotone = identity.precision.windows(2).all(|w| w[0] <= w[1]);

    let trials = 2000;
    let mut hits = 0.0;
    for trial in 0..trials {
        let gt = ids[rng.random_range(0..ids.len())].clone();
        let query = random_vector(&mut rng);
        let r = retrieval_precision(&[(query, gt)], &pool, &cfg(trial)).unwrap();
        monotone &= r.precision.windows(2).all(|w| w[0] <= w[1]);
        hits += r.at(5).unwrap();
    }
    let null = hits / f64::from(trials as u32);
    let p = 5.0 / 64.0;
    let se = (p * (1.0 - p) / f64::from(trials as u32)).sqrt();
    let z = (null - p).abs() / se;
    outcome(
        identity_p5 == 1.0 && z <= 3.0 && monotone,
        format!(
            "planted P@5 {identity_p5}, null P@5 {null:.4} vs {p:.4} ({z:.2} SE), monotone on every run: {monotone}"
        ),
    )
}

// 9. End-to-end determinism.

fn end_to_end_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    common::write_corpus(dir.path(), 3);
    let config = common::write_config(dir.path(), "checkpoint=model.ckpt\n");
    let base = RunConfig::load(&config).unwrap();
    let mut rng = seeded(9);
    let mut net = DenoiserNet::new(base.arch.clone(), 9).unwrap();
    for v in net.params_mut() {
        *v += 0.05 * standard_normal(&mut rng);
    }
    save_checkpoint(dir.path().join("model.ckpt"), &net, &base.schedule).unwrap();

    let mut runs = Vec::new();
    for (name, threads) in [("a", 1), ("b", 1), ("c", 3)] {
        let cfg = RunConfig { threads, ..base.clone() };
        let out = dir.path().join(name);
        let report = generate_cmd(&cfg, Some(&out)).unwrap();
        let files: Vec<Vec<u8>> = report
            .written
            .iter()
            .map(|id| fs::read(out.join(format!("{id}.mid"))).unwrap())
            .collect();
        runs.push((report.written.len(), files));
    }
    let identical = runs.iter().all(|r| r == &runs[0]);
    outcome(
        identical && runs[0].0 == 3,
        format!("3 items, runs with 1, 1 and 3 threads byte-identical: {identical}"),
    )
}

// 10. Conditioning sensitivity.

const FAMILY_STEPS: usize = 16;

/// A one-bar phrase with its own key and groove.
fn family_roll(seed: u64, lo: u8) -> PianoRoll {
    let mut rng = seeded(seed);
    let scale = [0u8, 2, 4, 5, 7, 9, 11];
    let root = rng.random_range(0..12u8);
    let pcs: Vec<u8> = (0..16u8).filter(|p| scale.contains(&((lo + p + 12 - root) % 12))).collect();
    let mut events = Vec::new();
    for s in 0..FAMILY_STEPS as u32 {
        if rng.random_bool(0.4) {
            let pitch = lo + pcs[rng.random_range(0..pcs.len())];
            events.push(NoteEvent::new(pitch, s, rng.random_range(1..3), 80));
        }
    }
    events_to_roll_steps(&events, 0, FAMILY_STEPS)
}

fn precision_at_5(
    arch: &ArchDescriptor,
    items: &[PianoRoll],
    conds: &[ConditionFeatures],
    pool: &BTreeMap<String, MusicFeatureVector>,
    samples: u64,
) -> (f64, f64) {
    let sched = NoiseSchedule::default();
    let mut net = DenoiserNet::new(arch.clone(), 1).unwrap();
    let corpus: Vec<TrainItem> = items
        .iter()
        .zip(conds)
        .map(|(r, c)| TrainItem {
            x0: arch.window(r).unwrap(),
            condition: arch.conditional.then(|| c.clone()),
        })
        .collect();
    let cfg = TrainConfig {
        steps: 24_000,
        learning_rate: 3e-3,
        batch: 4,
        seed: 3,
        ..TrainConfig::default()
    };
    let losses = train(&mut net, &corpus, &sched, &cfg, |_, _| {}).unwrap();
    let smoothed = losses[losses.len() - 100..].iter().sum::<f64>() / 100.0;
    let mut queries = Vec::new();
    for (i, c) in conds.iter().enumerate() {
        for s in 0..samples {
            let roll = generate(&net, arch.conditional.then_some(c), &sched, 100 * i as u64 + s).unwrap();
            queries.push((extract_feature(&roll), format!("item{i}")));
        }
    }
    let cfg = RetrievalConfig {
        m: 64,
        ks: vec![5],
        seed: 10,
    };
    (retrieval_precision(&queries, pool, &cfg).unwrap().at(5).unwrap(), smoothed)
}

fn conditioning_sensitivity() -> Outcome {
    let start = Instant::now();
    let base = ArchDescriptor::toy();
    let lo = base.pitch_lo as u8;
    let items: Vec<PianoRoll> = (0..4).map(|i| family_roll(1000 + i, lo)).collect();
    let conds: Vec<ConditionFeatures> = (0..4)
        .map(|i| synth_condition(FAMILY_STEPS, base.d_fv, base.d_fl, 50 + i as u64, SynthProfile::Planted { label: i }))
        .collect();
    let mut pool: BTreeMap<String, MusicFeatureVector> =
        (0..60).map(|i| (format!("d{i:02}"), extract_feature(&family_roll(5000 + i, lo)))).collect();
    for (i, r) in items.iter().enumerate() {
        pool.insert(format!("item{i}"), extract_feature(r));
    }
    let samples = 4;
    let n = 4.0 * samples as f64;
    let p = 5.0 / 64.0;
    let bound = p + 3.0 * (p * (1.0 - p) / n).sqrt();
    let (cond_p5, cond_loss) = precision_at_5(&base, &items, &conds, &pool, samples);
    let uncond = ArchDescriptor {
        conditional: false,
        ..base
    };
    let (uncond_p5, uncond_loss) = precision_at_5(&uncond, &items, &conds, &pool, samples);
    outcome(
        cond_p5 > bound && uncond_p5 <= bound,
        format!(
            "conditional P@5 {cond_p5:.4} (loss {cond_loss:.4}), unconditional P@5 {uncond_p5:.4} \
             (loss {uncond_loss:.4}), null bound {bound:.4} over {n} queries, {:.1?}",
            start.elapsed()
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("codec round trip", codec_round_trip),
        ("forward-process statistics", forward_statistics),
        ("gradient exactness", gradient_exactness),
        ("mask locality", mask_locality),
        ("feature selector", selector_fidelity),
        ("overfit smoke test", overfit_smoke),
        ("metric oracles", metric_oracles),
        ("retrieval protocol", retrieval_protocol),
        ("end-to-end determinism", end_to_end_determinism),
        ("conditioning sensitivity", conditioning_sensitivity),
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let number = i + 1;
        if !selected.is_empty() && !selected.contains(&number) {
            continue;
        }
        let o = run();
        let status = if o.pass { "PASS" } else { "FAIL" };
        println!("criterion {number:>2} {status} {name}: {}", o.detail);
        failed += usize::from(!o.pass);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

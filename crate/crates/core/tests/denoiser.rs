//! The network checked against a straight-line reimplementation, plus
//! gradient and training behavior.

use bgm_core::conditioning::{resample_sequence, synth_condition, SynthProfile};
use bgm_core::denoiser::{
    positional_encoding, select_condition, timestep_embedding, train, ArchDescriptor, Conditioning, DenoiserNet,
    Modality, TrainConfig, TrainItem,
};
use bgm_core::diffusion::NoiseSchedule;
use bgm_core::rng::{normal_tensor, seeded, standard_normal};
use bgm_core::{Error, Tensor};

/// `channels x height x width` map in plain vectors.
#[derive(Clone)]
struct Map {
    c: usize,
    h: usize,
    w: usize,
    v: Vec<f64>,
}

impl Map {
    fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.v[(c * self.h + y) * self.w + x]
    }
}

struct Oracle<'a> {
    net: &'a DenoiserNet,
}

impl Oracle<'_> {
    fn p(&self, name: &str) -> Vec<f64> {
        self.net.param(name).unwrap_or_else(|| panic!("{name}")).into_data()
    }

    fn conv(&self, x: &Map, name: &str, stride: usize) -> Map {
        let w = self.p(&format!("{name}.w"));
        let b = self.p(&format!("{name}.b"));
        let co = b.len();
        let (ho, wo) = ((x.h - 1) / stride + 1, (x.w - 1) / stride + 1);
        let mut v = vec![0.0; co * ho * wo];
        for o in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b[o];
                    for i in 0..x.c {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * stride + ky) as isize - 1;
                                let ix = (ox * stride + kx) as isize - 1;
                                if iy >= 0 && ix >= 0 && (iy as usize) < x.h && (ix as usize) < x.w {
                                    acc += w[((o * x.c + i) * 3 + ky) * 3 + kx] * x.at(i, iy as usize, ix as usize);
                                }
                            }
                        }
                    }
                    v[(o * ho + oy) * wo + ox] = acc;
                }
            }
        }
        Map { c: co, h: ho, w: wo, v }
    }

    fn linear(&self, x: &[f64], name: &str, bias: bool) -> Vec<f64> {
        let w = self.p(&format!("{name}.w"));
        let dout = w.len() / x.len();
        let mut out = if bias { self.p(&format!("{name}.b")) } else { vec![0.0; dout] };
        for (j, o) in out.iter_mut().enumerate() {
            for (i, xi) in x.iter().enumerate() {
                *o += xi * w[i * dout + j];
            }
        }
        out
    }

    fn matmul(&self, rows: &[Vec<f64>], name: &str) -> Vec<Vec<f64>> {
        let w = self.p(name);
        rows.iter()
            .map(|r| {
                let dout = w.len() / r.len();
                (0..dout).map(|j| r.iter().enumerate().map(|(i, x)| x * w[i * dout + j]).sum()).collect()
            })
            .collect()
    }

    fn res_block(&self, h: &Map, e: &[f64], p: &str) -> Map {
        let r = self.conv(&silu_map(h), &format!("{p}.conv1"), 1);
        let m = self.linear(e, &format!("{p}.film"), true);
        let plane = r.h * r.w;
        let mut r = r;
        for c in 0..r.c {
            for v in &mut r.v[c * plane..(c + 1) * plane] {
                *v = *v * (1.0 + m[c]) + m[r.c + c];
            }
        }
        let r = self.conv(&silu_map(&r), &format!("{p}.conv2"), 1);
        add(h, &r)
    }

    fn attend(&self, h: &Map, level: usize, feats: &Tensor, modality: Modality, p: &str) -> Map {
        let a = self.net.arch();
        let len = h.h;
        let tag = if modality == Modality::Dynamic { "fv" } else { "fl" };
        let raw = resample_sequence(feats, len);
        let pe = positional_encoding(len, a.d_cond);
        let fc: Vec<Vec<f64>> = (0..len)
            .map(|s| {
                let proj = self.linear(raw.row(s), &format!("cond.{tag}"), true);
                proj.iter().zip(pe.row(s)).map(|(x, y)| x + y).collect()
            })
            .collect();
        let keys = self.matmul(&fc, &format!("{p}.attn.wk"));
        let vals = self.matmul(&fc, &format!("{p}.attn.wv"));
        let frames = feats.shape()[0];
        let block = ((a.k * len) as f64 / frames as f64).round().max(1.0) as usize;
        assert_eq!(level, (a.steps / len).trailing_zeros() as usize);
        let qpe = positional_encoding(len, h.c);
        let mut out = h.clone();
        for s in 0..len {
            let start = s / block * block;
            let range = start..(start + block).min(len);
            for x in 0..h.w {
                let qin: Vec<f64> = (0..h.c).map(|c| h.at(c, s, x) + qpe.row(s)[c]).collect();
                let q = &self.matmul(&[qin], &format!("{p}.attn.wq"))[0];
                let logits: Vec<f64> = range
                    .clone()
                    .map(|m| q.iter().zip(&keys[m]).map(|(a, b)| a * b).sum::<f64>() / (q.len() as f64).sqrt())
                    .collect();
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
                let total: f64 = exps.iter().sum();
                let mut mixed = vec![0.0; vals[0].len()];
                for (wgt, m) in exps.iter().zip(range.clone()) {
                    for (o, v) in mixed.iter_mut().zip(&vals[m]) {
                        *o += wgt / total * v;
                    }
                }
                let delta = &self.matmul(&[mixed], &format!("{p}.attn.wo"))[0];
                for c in 0..h.c {
                    out.v[(c * h.h + s) * h.w + x] += delta[c];
                }
            }
        }
        out
    }

    fn forward(&self, x_t: &Tensor, t: usize, cond: Option<(&Tensor, Modality)>) -> Vec<f64> {
        let a = self.net.arch();
        let e: Vec<f64> = self
            .linear(timestep_embedding(t, a.d_model).data(), "time", true)
            .into_iter()
            .map(silu)
            .collect();
        let x = Map {
            c: 2,
            h: a.steps,
            w: a.pitches,
            v: x_t.data().to_vec(),
        };
        let mut h = self.conv(&x, "in", 1);
        for (v, p) in h.v.iter_mut().zip(self.p("pos.emb")) {
            *v += p;
        }
        let mut skips = Vec::new();
        for l in 0..a.levels() {
            if l > 0 {
                h = self.conv(&h, &format!("down{l}"), 2);
            }
            h = self.res_block(&h, &e, &format!("enc{l}"));
            if let Some((f, m)) = cond {
                h = self.attend(&h, l, f, m, &format!("enc{l}"));
            }
            skips.push(h.clone());
        }
        for l in (0..a.levels()).rev() {
            if l + 1 < a.levels() {
                let up = Map {
                    c: h.c,
                    h: 2 * h.h,
                    w: 2 * h.w,
                    v: (0..h.c * 4 * h.h * h.w)
                        .map(|i| {
                            let (c, rest) = (i / (4 * h.h * h.w), i % (4 * h.h * h.w));
                            let (y, x) = (rest / (2 * h.w), rest % (2 * h.w));
                            h.at(c, y / 2, x / 2)
                        })
                        .collect(),
                };
                h = add(&self.conv(&up, &format!("up{l}"), 1), &skips[l]);
            }
            h = self.res_block(&h, &e, &format!("dec{l}"));
            if let Some((f, m)) = cond {
                h = self.attend(&h, l, f, m, &format!("dec{l}"));
            }
        }
        self.conv(&silu_map(&h), "out", 1).v
    }
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_map(m: &Map) -> Map {
    Map {
        v: m.v.iter().copied().map(silu).collect(),
        ..m.clone()
    }
}

fn add(a: &Map, b: &Map) -> Map {
    Map {
        v: a.v.iter().zip(&b.v).map(|(x, y)| x + y).collect(),
        ..a.clone()
    }
}

/// A toy net with every parameter non-zero.
fn busy_net(arch: ArchDescriptor, seed: u64) -> DenoiserNet {
    let mut net = DenoiserNet::new(arch, seed).unwrap();
    let mut rng = seeded(seed + 1);
    for v in net.params_mut() {
        *v += 0.2 * standard_normal(&mut rng);
    }
    net
}

fn assert_matches_oracle(net: &DenoiserNet, cond: Option<(&Tensor, Modality)>, t: usize) {
    let mut rng = seeded(77);
    let x = normal_tensor(&mut rng, &net.arch().input_shape());
    let got = net.forward(&x, t, cond.map(|(f, m)| Conditioning::new(f, m))).unwrap();
    let want = Oracle { net }.forward(&x, t, cond);
    assert_eq!(got.len(), want.len());
    for (i, (g, w)) in got.data().iter().zip(&want).enumerate() {
        assert!((g - w).abs() <= 1e-10 * (1.0 + w.abs()), "cell {i}: {g} vs {w}");
    }
}

#[test]
fn conditional_forward_matches_straight_line_oracle() {
    let arch = ArchDescriptor::toy();
    let net = busy_net(arch.clone(), 5);
    let cond = synth_condition(24, arch.d_fv, arch.d_fl, 6, SynthProfile::Random);
    for t in [37, 640] {
        let (f, m) = select_condition(&cond, t, arch.t0);
        assert_matches_oracle(&net, Some((f, m)), t);
    }
}

#[test]
fn three_level_forward_matches_oracle() {
    let arch = ArchDescriptor {
        channels: vec![2, 3, 4],
        steps: 8,
        pitches: 8,
        k: 3,
        ..ArchDescriptor::toy()
    };
    let net = busy_net(arch.clone(), 8);
    let cond = synth_condition(5, arch.d_fv, arch.d_fl, 9, SynthProfile::Random);
    assert_matches_oracle(&net, Some((&cond.fv, Modality::Dynamic)), 3);
}

#[test]
fn unconditional_forward_matches_oracle() {
    let arch = ArchDescriptor {
        conditional: false,
        ..ArchDescriptor::toy()
    };
    assert_matches_oracle(&busy_net(arch, 11), None, 500);
}

#[test]
fn condition_is_ignored_without_attention_parameters() {
    let arch = ArchDescriptor {
        conditional: false,
        ..ArchDescriptor::toy()
    };
    let net = busy_net(arch.clone(), 12);
    let cond = synth_condition(16, arch.d_fv, arch.d_fl, 1, SynthProfile::Random);
    let x = normal_tensor(&mut seeded(1), &arch.input_shape());
    let a = net.forward(&x, 10, None).unwrap();
    let b = net.forward(&x, 10, Some(Conditioning::new(&cond.fv, Modality::Dynamic))).unwrap();
    assert_eq!(a, b);
}

#[test]
fn fresh_net_predicts_zero_noise() {
    let arch = ArchDescriptor::toy();
    let net = DenoiserNet::new(arch.clone(), 2).unwrap();
    let x = normal_tensor(&mut seeded(3), &arch.input_shape());
    assert!(net.forward(&x, 10, None).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn gradients_match_central_differences() {
    let arch = ArchDescriptor::toy();
    let mut net = busy_net(arch.clone(), 21);
    let mut rng = seeded(22);
    let cond = synth_condition(20, arch.d_fv, arch.d_fl, 23, SynthProfile::Blocky { k: 4 });
    let x = normal_tensor(&mut rng, &arch.input_shape());
    let target = normal_tensor(&mut rng, &arch.input_shape());
    for t in [150, 900] {
        let (f, m) = select_condition(&cond, t, arch.t0);
        let loss = |n: &DenoiserNet| n.loss_and_grad(&x, t, Some(Conditioning::new(f, m)), &target).unwrap();
        let (_, grad) = loss(&net);
        let h = 1e-4;
        for i in rand::seq::index::sample(&mut rng, net.param_count(), 100) {
            let orig = net.params()[i];
            net.params_mut()[i] = orig + h;
            let up = loss(&net).0;
            net.params_mut()[i] = orig - h;
            let down = loss(&net).0;
            net.params_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6);
            assert!(rel <= 1e-4, "t={t} param {i}: analytic {} vs numeric {fd}", grad[i]);
        }
    }
}

#[test]
fn huge_learning_rate_diverges_and_restores_last_good_parameters() {
    let arch = ArchDescriptor::toy();
    let mut net = DenoiserNet::new(arch.clone(), 1).unwrap();
    let item = TrainItem {
        x0: Tensor::full(&arch.input_shape(), -1.0),
        condition: None,
    };
    let cfg = TrainConfig {
        steps: 100,
        learning_rate: 1e300,
        ..TrainConfig::default()
    };
    let failure = train(&mut net, &[item], &NoiseSchedule::default(), &cfg, |_, _| {}).unwrap_err();
    match failure.error {
        Error::Divergence { step, loss } => {
            assert!(!loss.is_finite());
            assert_eq!(failure.losses.len(), step + 1);
        }
        other => panic!("unexpected {other:?}"),
    }
    assert!(net.params().iter().all(|v| v.is_finite()));
    assert!(net.forward(&Tensor::zeros(&arch.input_shape()), 5, None).unwrap().all_finite());
}

#[test]
fn training_reduces_loss_on_one_item() {
    let arch = ArchDescriptor::toy();
    let mut net = DenoiserNet::new(arch.clone(), 4).unwrap();
    let cond = synth_condition(16, arch.d_fv, arch.d_fl, 5, SynthProfile::Blocky { k: 4 });
    let mut x0 = Tensor::full(&arch.input_shape(), -1.0);
    for s in (0..16).step_by(4) {
        x0.data_mut()[s * 16 + 4] = 1.0;
    }
    let item = TrainItem {
        x0,
        condition: Some(cond),
    };
    let cfg = TrainConfig {
        steps: 400,
        learning_rate: 3e-3,
        batch: 2,
        seed: 6,
        ..TrainConfig::default()
    };
    let losses = train(&mut net, &[item], &NoiseSchedule::default(), &cfg, |_, _| {}).unwrap();
    let head = losses[..50].iter().sum::<f64>() / 50.0;
    let tail = losses[350..].iter().sum::<f64>() / 50.0;
    assert!(tail < 0.5 * head, "loss {head} -> {tail}");
}

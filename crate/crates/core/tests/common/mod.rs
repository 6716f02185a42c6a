//! Independent re-derivations used by several test targets.
#![allow(dead_code)]

use rand::Rng as _;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use stabpa::align::{
    loss_s2t, loss_t2s, source_prototypes, stabpa_batch_loss, AlignConfig, PrototypeBank, SourceItem, TargetItem,
};
use stabpa::encoder::EncoderParams;
use stabpa::pseudo::ClassifierHead;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    // Box-Muller keeps this file free of the crate's own sampling helpers.
    (0..n)
        .map(|_| {
            let u1: f64 = rng.random_range(1e-12..1.0);
            let u2: f64 = rng.random();
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect()
}

pub fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    v
}

/// Encoder forward written with explicit loops over nested layer matrices.
pub fn naive_embed(params: &EncoderParams, x: &[f64]) -> Vec<f64> {
    let widths = params.widths().to_vec();
    let flat = params.as_slice();
    let mut offset = 0;
    let mut h = x.to_vec();
    for l in 0..widths.len() - 1 {
        let (fan_in, fan_out) = (widths[l], widths[l + 1]);
        let mut next = vec![0.0; fan_out];
        for (o, out) in next.iter_mut().enumerate() {
            let mut acc = 0.0;
            for i in 0..fan_in {
                acc += flat[offset + o * fan_in + i] * h[i];
            }
            *out = acc + flat[offset + fan_in * fan_out + o];
        }
        offset += fan_in * fan_out + fan_out;
        if l + 2 < widths.len() {
            for v in &mut next {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        h = next;
    }
    let n = h.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    h.iter().map(|v| v / n).collect()
}

/// `−log( exp(−d_q/τ) / Σ_k exp(−d_k/τ) )` over the listed prototypes,
/// written as `ln(1 + Σ_{k≠q} exp((d_q − d_k)/τ))` so that a nearly
/// saturated softmax keeps its digits under finite differencing.
pub fn explicit_softmax_loss(u: &[f64], protos: &[Vec<f64>], q: usize, tau: f64) -> f64 {
    let d: Vec<f64> = protos
        .iter()
        .map(|p| u.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .collect();
    let rest: f64 = d
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != q)
        .map(|(_, dk)| ((d[q] - dk) / tau).exp())
        .sum();
    rest.ln_1p()
}

pub struct Instance {
    pub encoder: EncoderParams,
    pub head: ClassifierHead,
    pub bank: PrototypeBank,
    pub source: Vec<(Vec<f64>, usize)>,
    pub target: Vec<(Vec<f64>, usize, f64)>,
    pub weight: f64,
    pub config: AlignConfig,
}

impl Instance {
    pub fn loss(&self) -> (stabpa::align::LossReport, stabpa::align::BatchGradients) {
        self.loss_with(&self.encoder, &self.head)
    }

    pub fn loss_with(
        &self,
        encoder: &EncoderParams,
        head: &ClassifierHead,
    ) -> (stabpa::align::LossReport, stabpa::align::BatchGradients) {
        let src: Vec<SourceItem> = self
            .source
            .iter()
            .map(|(x, y)| SourceItem { features: x, label: *y })
            .collect();
        let tgt: Vec<TargetItem> = self
            .target
            .iter()
            .map(|(x, y, c)| TargetItem {
                features: x,
                pseudo_label: *y,
                confidence: *c,
            })
            .collect();
        stabpa_batch_loss(encoder, head, &self.bank, &src, &tgt, self.weight, &self.config).unwrap()
    }

    /// The same objective from [`naive_embed`] and [`explicit_softmax_loss`].
    pub fn brute_force_total(&self) -> f64 {
        let c = self.head.classes;
        let cfg = &self.config;
        let src_protos: Vec<Vec<f64>> = (0..c).map(|k| unit(self.head.row(k).to_vec())).collect();
        let active: Vec<usize> = (0..c).filter(|&k| self.bank.is_initialized(k)).collect();
        let tgt_protos: Vec<Vec<f64>> = active.iter().map(|&k| self.bank.row(k).to_vec()).collect();

        let mut s2t = 0.0;
        let mut ce = 0.0;
        for (x, y) in &self.source {
            let u = naive_embed(&self.encoder, x);
            if cfg.use_s2t {
                if let Some(pos) = active.iter().position(|k| k == y) {
                    s2t += explicit_softmax_loss(&u, &tgt_protos, pos, cfg.tau_st);
                }
            }
            let logits: Vec<f64> = (0..c)
                .map(|k| self.head.row(k).iter().zip(&u).map(|(a, b)| a * b).sum::<f64>() / self.head.temperature)
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            ce += -(logits[*y].exp() / z).ln();
        }
        let n = self.source.len() as f64;
        let mut t2s = 0.0;
        let mut confident = 0usize;
        for (x, y, conf) in &self.target {
            if *conf > cfg.beta {
                confident += 1;
                if cfg.use_t2s {
                    t2s += explicit_softmax_loss(&naive_embed(&self.encoder, x), &src_protos, *y, cfg.tau_ts);
                }
            }
        }
        let t2s = if confident > 0 { t2s / confident as f64 } else { 0.0 };
        self.weight * s2t / n + t2s + cfg.aux_ce_weight * ce / n
    }
}

pub struct InstanceShape {
    pub input: usize,
    pub hidden: usize,
    pub embed: usize,
    pub classes: usize,
    pub per_class: usize,
}

/// Random batch-loss instance. Bank rows are random (not unit) vectors with
/// a random initialisation mask; confidences straddle β.
pub fn random_instance(seed: u64, shape: &InstanceShape) -> Instance {
    let mut r = rng(seed);
    let widths = [shape.input, shape.hidden, shape.embed];
    let mut enc_rng = stabpa::rng::stream_rng(seed, stabpa::rng::Stream::Init, 0);
    let mut encoder = EncoderParams::init(&widths, &mut enc_rng).unwrap();
    // Non-zero biases exercise the bias gradients.
    for v in encoder.as_mut_slice() {
        *v += 0.05 * gaussian_vec(&mut r, 1)[0];
    }
    let head_w = gaussian_vec(&mut r, shape.classes * shape.embed);
    let head = ClassifierHead::from_weights(shape.classes, shape.embed, head_w).unwrap();
    let mut bank = PrototypeBank::new(shape.classes, shape.embed, 0.0);
    let mut init = vec![false; shape.classes];
    for (k, flag) in init.iter_mut().enumerate() {
        *flag = k == 0 || r.random_bool(0.7);
    }
    for k in 0..shape.classes {
        if init[k] {
            let row = gaussian_vec(&mut r, shape.embed).iter().map(|v| 0.4 * v).collect::<Vec<_>>();
            bank.update(&[row], &[k], &[1.0], 0.5).unwrap();
        }
    }
    let mut source = Vec::new();
    let mut target = Vec::new();
    for k in 0..shape.classes {
        for _ in 0..shape.per_class {
            source.push((gaussian_vec(&mut r, shape.input), k));
            let pseudo = r.random_range(0..shape.classes);
            let conf = r.random_range(0.0..1.0);
            target.push((gaussian_vec(&mut r, shape.input), pseudo, conf));
        }
    }
    Instance {
        encoder,
        head,
        bank,
        source,
        target,
        weight: r.random_range(0.0..0.5),
        config: AlignConfig {
            tau_st: 0.25,
            tau_ts: 0.1,
            beta: 0.5,
            use_s2t: true,
            use_t2s: true,
            aux_ce_weight: 1.0,
            strict_prototypes: false,
        },
    }
}

/// `‖a − n‖ / max(‖a‖, ‖n‖, floor)` over whole gradient vectors.
pub fn relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / na.max(nn).max(floor)
}

/// Central differences of `f` at `x` along every coordinate.
pub fn numeric_gradient(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let up = f(&p);
            p[i] = orig - h;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub const FD_STEP: f64 = 1e-6;
pub const FD_TOLERANCE: f64 = 1e-5;

/// Worst relative error of ∂ℓ_{s→t}/∂(u, prototypes) over `n` instances.
pub fn check_s2t(n: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..n {
        let mut r = rng(1000 + seed);
        let dim = 2 + (seed as usize % 6);
        let classes = 2 + (seed as usize % 4);
        let u = unit(gaussian_vec(&mut r, dim));
        let mut bank = PrototypeBank::new(classes, dim, 0.0);
        let rows: Vec<Vec<f64>> = (0..classes).map(|_| unit(gaussian_vec(&mut r, dim))).collect();
        let labels: Vec<usize> = (0..classes).collect();
        bank.update(&rows, &labels, &vec![1.0; classes], 0.5).unwrap();
        let q = r.random_range(0..classes);
        let tau = 0.25;
        let pl = loss_s2t(&u, q, &bank, tau).unwrap().unwrap();
        let protos: Vec<Vec<f64>> = rows.clone();
        let nu = numeric_gradient(&u, FD_STEP, |v| explicit_softmax_loss(v, &protos, q, tau));
        worst = worst.max(relative_error(&pl.grad_embedding, &nu, 1e-8));
        let flat: Vec<f64> = rows.concat();
        let np = numeric_gradient(&flat, FD_STEP, |p| {
            let ps: Vec<Vec<f64>> = p.chunks(dim).map(<[f64]>::to_vec).collect();
            explicit_softmax_loss(&u, &ps, q, tau)
        });
        worst = worst.max(relative_error(&pl.grad_prototypes, &np, 1e-8));
    }
    worst
}

/// Worst relative error of ∂ℓ_{t→s}/∂(u, raw head weights) over `n` instances.
pub fn check_t2s(n: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..n {
        let mut r = rng(2000 + seed);
        let dim = 2 + (seed as usize % 6);
        let classes = 2 + (seed as usize % 4);
        let u = unit(gaussian_vec(&mut r, dim));
        let w = gaussian_vec(&mut r, classes * dim);
        let head = ClassifierHead::from_weights(classes, dim, w.clone()).unwrap();
        let protos = source_prototypes(&head, true).unwrap();
        let q = r.random_range(0..classes);
        let tau = 0.1;
        let out = loss_t2s(&u, q, &protos, tau).unwrap();
        let rows = |w: &[f64]| -> Vec<Vec<f64>> { w.chunks(dim).map(|c| unit(c.to_vec())).collect() };
        let nu = numeric_gradient(&u, FD_STEP, |v| explicit_softmax_loss(v, &rows(&w), q, tau));
        worst = worst.max(relative_error(&out.grad_embedding, &nu, 1e-8));
        let nw = numeric_gradient(&w, FD_STEP, |wv| explicit_softmax_loss(&u, &rows(wv), q, tau));
        worst = worst.max(relative_error(&out.grad_head_weights, &nw, 1e-8));
    }
    worst
}

/// Worst relative error of the encoder backward pass (parameters and
/// input) for a random linear functional of the embedding.
pub fn check_encoder(n: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..n {
        let mut r = rng(3000 + seed);
        let input = 2 + (seed as usize % 5);
        let hidden = 3 + (seed as usize % 4);
        let embed = 2 + (seed as usize % 3);
        let widths: Vec<usize> = if seed % 3 == 0 {
            vec![input, hidden, hidden + 1, embed]
        } else {
            vec![input, hidden, embed]
        };
        let mut erng = stabpa::rng::stream_rng(seed, stabpa::rng::Stream::Init, 7);
        let mut enc = EncoderParams::init(&widths, &mut erng).unwrap();
        for v in enc.as_mut_slice() {
            *v += 0.1 * gaussian_vec(&mut r, 1)[0];
        }
        let x = gaussian_vec(&mut r, input);
        let g = gaussian_vec(&mut r, embed);
        let (_, cache) = enc.forward(&x).unwrap();
        let (gp, gx) = enc.backward(&cache, &g).unwrap();
        let objective = |e: &EncoderParams, x: &[f64]| -> f64 {
            naive_embed(e, x).iter().zip(&g).map(|(a, b)| a * b).sum()
        };
        let flat = enc.as_slice().to_vec();
        let np = numeric_gradient(&flat, FD_STEP, |p| {
            let e = EncoderParams::from_parts(widths.clone(), p.to_vec()).unwrap();
            objective(&e, &x)
        });
        worst = worst.max(relative_error(gp.as_slice(), &np, 1e-8));
        let nx = numeric_gradient(&x, FD_STEP, |xv| objective(&enc, xv));
        worst = worst.max(relative_error(&gx, &nx, 1e-8));
    }
    worst
}

/// Worst relative error of the full batch-loss gradient (encoder parameters
/// and head weights) over `n` instances.
pub fn check_batch_loss(n: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..n {
        let inst = random_instance(
            4000 + seed,
            &InstanceShape {
                input: 3 + (seed as usize % 3),
                hidden: 5,
                embed: 3 + (seed as usize % 2),
                classes: 2 + (seed as usize % 3),
                per_class: 1 + (seed as usize % 2),
            },
        );
        let (_, grads) = inst.loss();
        let widths = inst.encoder.widths().to_vec();
        let np = numeric_gradient(inst.encoder.as_slice(), FD_STEP, |p| {
            let e = EncoderParams::from_parts(widths.clone(), p.to_vec()).unwrap();
            inst.loss_with(&e, &inst.head).0.total
        });
        worst = worst.max(relative_error(grads.encoder.as_slice(), &np, 1e-8));
        let nh = numeric_gradient(&inst.head.weights, FD_STEP, |w| {
            let h = ClassifierHead::from_weights(inst.head.classes, inst.head.dim, w.to_vec()).unwrap();
            inst.loss_with(&inst.encoder, &h).0.total
        });
        worst = worst.max(relative_error(&grads.head, &nh, 1e-8));
    }
    worst
}

/// Largest |library − brute force| over every shape up to 3 classes × 3
/// samples per class, each bank initialisation mask, several curriculum
/// weights and loss toggles.
pub fn oracle_max_deviation() -> (f64, usize) {
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for classes in 1..=3usize {
        for per_class in 1..=3usize {
            for mask in 0..(1u32 << classes) {
                for (variant, (s2t, t2s, ce)) in
                    [(true, true, 1.0), (true, false, 0.0), (false, true, 0.5)].into_iter().enumerate()
                {
                    let seed = (classes * 100 + per_class * 10) as u64 * 64 + u64::from(mask) * 4 + variant as u64;
                    let mut inst = random_instance(
                        seed,
                        &InstanceShape {
                            input: 4,
                            hidden: 6,
                            embed: 3,
                            classes,
                            per_class,
                        },
                    );
                    let mut bank = PrototypeBank::new(classes, 3, 0.0);
                    let mut r = rng(seed ^ 0xabc);
                    for k in 0..classes {
                        if mask & (1 << k) != 0 {
                            let row = gaussian_vec(&mut r, 3);
                            bank.update(&[row], &[k], &[1.0], 0.0).unwrap();
                        }
                    }
                    inst.bank = bank;
                    inst.config.use_s2t = s2t;
                    inst.config.use_t2s = t2s;
                    inst.config.aux_ce_weight = ce;
                    for w in [0.0, 0.3, 2.0 / (1.0 + (-1.0f64).exp()) - 1.0] {
                        inst.weight = w;
                        let lib = inst.loss().0.total;
                        worst = worst.max((lib - inst.brute_force_total()).abs());
                        cases += 1;
                    }
                }
            }
        }
    }
    (worst, cases)
}

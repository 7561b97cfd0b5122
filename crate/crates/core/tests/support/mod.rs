//! Helpers shared by the integration test targets.

#![allow(dead_code)]

use constyle_core::prompter::{
    content_loss, cross_entropy, info_nce, kl_distill, style_loss, NegativeQueue, Tape, Tensor, Var,
};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v = random_vec(rng, d, -1.0, 1.0);
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), random_vec(rng, n, lo, hi)).unwrap()
}

/// Outcome of checking one backward rule against central differences.
#[derive(Clone, Debug)]
pub struct GradReport {
    pub name: String,
    pub points: usize,
    pub max_rel: f64,
}

impl GradReport {
    fn new(name: &str) -> Self {
        GradReport {
            name: name.to_string(),
            points: 0,
            max_rel: 0.0,
        }
    }

    fn record(&mut self, analytic: f64, numeric: f64) {
        self.points += 1;
        let e = rel_err(analytic, numeric);
        if e > self.max_rel || e.is_nan() {
            self.max_rel = if e.is_nan() { f64::INFINITY } else { e };
        }
    }
}

fn central(f: &dyn Fn(&[f64]) -> f64, x: &[f64], i: usize) -> f64 {
    let mut xp = x.to_vec();
    xp[i] += FD_STEP;
    let mut xm = x.to_vec();
    xm[i] -= FD_STEP;
    (f(&xp) - f(&xm)) / (2.0 * FD_STEP)
}

fn pick(rng: &mut ChaCha8Rng, len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        (0..len).collect()
    } else {
        sample(rng, len, max).into_vec()
    }
}

/// Checks the tape rule of a layer built by `build` with respect to every
/// input, using the scalar `Σ r ⊙ y` for a random `r`.
fn layer_check(
    name: &str,
    rng: &mut ChaCha8Rng,
    inputs: Vec<Tensor>,
    build: &dyn Fn(&mut Tape, &[Var]) -> Var,
    per_input: usize,
) -> GradReport {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let y = build(&mut tape, &vars);
    let r = random_tensor(rng, tape.value(y).shape(), -1.0, 1.0);
    let grads = tape.backward(vec![(y, r.clone())]).unwrap();
    let mut report = GradReport::new(name);
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[i])
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; input.len()]);
        let f = |x: &[f64]| -> f64 {
            let mut t = Tape::new();
            let vs: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, inp)| {
                    if j == i {
                        t.leaf(Tensor::new(inp.shape().to_vec(), x.to_vec()).unwrap())
                    } else {
                        t.leaf(inp.clone())
                    }
                })
                .collect();
            let out = build(&mut t, &vs);
            t.value(out).data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
        };
        for idx in pick(rng, input.len(), per_input) {
            report.record(analytic[idx], central(&f, input.data(), idx));
        }
    }
    report
}

/// Random values kept at least `gap` away from zero.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(gap..1.0);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn layer_reports(seed: u64) -> Vec<GradReport> {
    let mut rng = rng(seed);
    let mut out = Vec::new();

    for (label, stride, bias) in [("conv2d stride 1 + bias", 1, true), ("conv2d stride 2", 2, false)] {
        let x = random_tensor(&mut rng, &[2, 3, 7, 6], -1.0, 1.0);
        let w = random_tensor(&mut rng, &[4, 3, 3, 3], -0.5, 0.5);
        let mut inputs = vec![x, w];
        if bias {
            inputs.push(random_tensor(&mut rng, &[4], -0.5, 0.5));
        }
        let build = move |t: &mut Tape, v: &[Var]| t.conv2d(v[0], v[1], v.get(2).copied(), stride, 1).unwrap();
        out.push(layer_check(label, &mut rng, inputs, &build, 60));
    }

    let x = random_tensor(&mut rng, &[3, 4, 3, 3], -2.0, 2.0);
    let g = random_tensor(&mut rng, &[4], 0.5, 1.5);
    let b = random_tensor(&mut rng, &[4], -0.5, 0.5);
    let build = |t: &mut Tape, v: &[Var]| t.batch_norm(v[0], v[1], v[2], None).unwrap().0;
    out.push(layer_check("batch_norm train", &mut rng, vec![x, g, b], &build, 100));

    let x = random_tensor(&mut rng, &[3, 4, 3, 3], -2.0, 2.0);
    let g = random_tensor(&mut rng, &[4], 0.5, 1.5);
    let b = random_tensor(&mut rng, &[4], -0.5, 0.5);
    let rm = random_vec(&mut rng, 4, -0.5, 0.5);
    let rv = random_vec(&mut rng, 4, 0.5, 2.0);
    let build = move |t: &mut Tape, v: &[Var]| t.batch_norm(v[0], v[1], v[2], Some((&rm, &rv))).unwrap().0;
    out.push(layer_check("batch_norm eval", &mut rng, vec![x, g, b], &build, 100));

    let x = away_from_zero(&mut rng, &[2, 3, 5, 5], 1e-3);
    let build = |t: &mut Tape, v: &[Var]| t.relu(v[0]);
    out.push(layer_check("relu", &mut rng, vec![x], &build, 150));

    let x = random_tensor(&mut rng, &[3, 5, 4, 4], -1.0, 1.0);
    let build = |t: &mut Tape, v: &[Var]| t.global_avg_pool(v[0]).unwrap();
    out.push(layer_check("global_avg_pool", &mut rng, vec![x], &build, 150));

    let x = random_tensor(&mut rng, &[8, 9], -1.0, 1.0);
    let w = random_tensor(&mut rng, &[6, 9], -1.0, 1.0);
    let b = random_tensor(&mut rng, &[6], -1.0, 1.0);
    let build = |t: &mut Tape, v: &[Var]| t.linear(v[0], v[1], v[2]).unwrap();
    out.push(layer_check("linear", &mut rng, vec![x, w, b], &build, 100));

    let x = random_tensor(&mut rng, &[12, 10], -1.0, 1.0);
    let build = |t: &mut Tape, v: &[Var]| t.l2_normalize(v[0]).unwrap();
    out.push(layer_check("l2_normalize", &mut rng, vec![x], &build, 120));

    // A whole encoder-shaped chain, checked end to end.
    let x = random_tensor(&mut rng, &[4, 3, 6, 6], 0.0, 1.0);
    let w1 = random_tensor(&mut rng, &[5, 3, 3, 3], -0.5, 0.5);
    let g1 = random_tensor(&mut rng, &[5], 0.5, 1.5);
    let b1 = random_tensor(&mut rng, &[5], -0.2, 0.2);
    let pw = random_tensor(&mut rng, &[6, 5], -1.0, 1.0);
    let pb = random_tensor(&mut rng, &[6], -0.5, 0.5);
    let build = |t: &mut Tape, v: &[Var]| {
        let h = t.conv2d(v[0], v[1], None, 2, 1).unwrap();
        let (h, _) = t.batch_norm(h, v[2], v[3], None).unwrap();
        let h = t.relu(h);
        let p = t.global_avg_pool(h).unwrap();
        let z = t.linear(p, v[4], v[5]).unwrap();
        t.l2_normalize(z).unwrap()
    };
    out.push(layer_check("conv-bn-relu-pool-linear-l2 chain", &mut rng, vec![x, w1, g1, b1, pw, pb], &build, 40));
    out
}

pub fn loss_reports(seed: u64) -> Vec<GradReport> {
    let mut rng = rng(seed);
    let mut out = Vec::new();

    let mut rep = GradReport::new("info_nce");
    let d = 8;
    for _ in 0..15 {
        let mut queue = NegativeQueue::new(32, d).unwrap();
        for _ in 0..20 {
            queue.enqueue(&random_unit(&mut rng, d)).unwrap();
        }
        let q = random_unit(&mut rng, d);
        let k = random_unit(&mut rng, d);
        let tau = rng.random_range(0.07..1.0);
        let (_, g) = info_nce(&q, &k, &queue, tau).unwrap();
        let f = |x: &[f64]| info_nce(x, &k, &queue, tau).unwrap().0;
        for i in 0..d {
            rep.record(g[i], central(&f, &q, i));
        }
    }
    out.push(rep);

    let shapes: [&[usize]; 2] = [&[2, 3, 4, 4], &[2, 5, 2, 2]];
    let mut rep = GradReport::new("content_loss");
    {
        let s: Vec<Tensor> = shapes.iter().map(|sh| random_tensor(&mut rng, sh, -1.0, 1.0)).collect();
        let t: Vec<Tensor> = s
            .iter()
            .map(|x| {
                let off = away_from_zero(&mut rng, x.shape(), 1e-2);
                let mut y = x.clone();
                y.add_assign(&off);
                y
            })
            .collect();
        let (_, grads) = content_loss(&s, &t).unwrap();
        for m in 0..s.len() {
            let f = |x: &[f64]| {
                let mut maps = s.clone();
                maps[m] = Tensor::new(s[m].shape().to_vec(), x.to_vec()).unwrap();
                content_loss(&maps, &t).unwrap().0
            };
            for i in 0..s[m].len() {
                rep.record(grads[m].data()[i], central(&f, s[m].data(), i));
            }
        }
    }
    out.push(rep);

    let shapes: [&[usize]; 2] = [&[2, 3, 4, 4], &[2, 2, 3, 3]];
    let mut rep = GradReport::new("style_loss");
    {
        let a: Vec<Tensor> = shapes.iter().map(|sh| random_tensor(&mut rng, sh, -1.0, 1.0)).collect();
        let b: Vec<Tensor> = shapes.iter().map(|sh| random_tensor(&mut rng, sh, -2.0, 2.0)).collect();
        let (_, grads) = style_loss(&a, &b).unwrap();
        for m in 0..a.len() {
            let f = |x: &[f64]| {
                let mut maps = a.clone();
                maps[m] = Tensor::new(a[m].shape().to_vec(), x.to_vec()).unwrap();
                style_loss(&maps, &b).unwrap().0
            };
            for i in 0..a[m].len() {
                rep.record(grads[m].data()[i], central(&f, a[m].data(), i));
            }
        }
    }
    out.push(rep);

    let mut rep = GradReport::new("cross_entropy");
    for _ in 0..12 {
        let logits = random_vec(&mut rng, 10, -4.0, 4.0);
        let label = rng.random_range(0..10);
        let (_, g) = cross_entropy(&logits, label).unwrap();
        let f = |x: &[f64]| cross_entropy(x, label).unwrap().0;
        for i in 0..10 {
            rep.record(g[i], central(&f, &logits, i));
        }
    }
    out.push(rep);

    let mut rep = GradReport::new("kl_distill");
    for _ in 0..12 {
        let t = random_vec(&mut rng, 10, -4.0, 4.0);
        let s = random_vec(&mut rng, 10, -4.0, 4.0);
        let temp = rng.random_range(0.5..2.0);
        let (_, g) = kl_distill(&t, &s, temp).unwrap();
        let f = |x: &[f64]| kl_distill(&t, x, temp).unwrap().0;
        for i in 0..10 {
            rep.record(g[i], central(&f, &s, i));
        }
    }
    out.push(rep);
    out
}

/// A gray test pair defined by integer formulas so that other
/// implementations can rebuild it exactly: `a = (3x + 2y + 40·((x/4 + y/4) mod 3)) mod 256`,
/// `b = clamp(a + ((7x + 3y) mod 21) − 10, 0, 255)`, both divided by 255.
pub fn ssim_reference_pair() -> (constyle_core::ImageTensor, constyle_core::ImageTensor) {
    let (h, w) = (48, 64);
    let code_a = |y: usize, x: usize| (x * 3 + y * 2 + ((x / 4 + y / 4) % 3) * 40) % 256;
    let code_b = |y: usize, x: usize| (code_a(y, x) as i64 + ((x * 7 + y * 3) % 21) as i64 - 10).clamp(0, 255);
    let a = constyle_core::ImageTensor::from_fn(h, w, 1, |y, x, _| code_a(y, x) as f32 / 255.0).unwrap();
    let b = constyle_core::ImageTensor::from_fn(h, w, 1, |y, x, _| code_b(y, x) as f32 / 255.0).unwrap();
    (a, b)
}

/// scikit-image 0.x `structural_similarity(a, b, gaussian_weights=True,
/// sigma=1.5, use_sample_covariance=False, data_range=1.0)` on
/// [`ssim_reference_pair`] (inputs as float32 promoted to float64).
pub const SSIM_REFERENCE_VALUE: f64 = 0.986_190_747_550_569_9;

/// Colour card with ramps, hard edges and fine stripes.
pub fn test_card(h: usize, w: usize) -> constyle_core::ImageTensor {
    constyle_core::ImageTensor::from_fn(h, w, 3, |y, x, c| {
        let ramp = (x + y) as f32 / (h + w) as f32;
        let block = if (x / 8 + y / 8) % 2 == 0 { 0.8 } else { 0.2 };
        let stripes = if (x / 2) % 2 == 0 { 0.9 } else { 0.1 };
        let v = match c {
            0 => 0.5 * ramp + 0.5 * block,
            1 => if y < h / 2 { stripes } else { ramp },
            _ => 0.3 + 0.4 * ((x as f32 * 0.3).sin() * (y as f32 * 0.2).cos()).abs(),
        };
        v.clamp(0.0, 1.0)
    })
    .unwrap()
}

/// Writes a small source tree for dataset forging: a paired task with
/// matching `input/` and `target/` folders and a clean-only folder for
/// synthetic tasks. Returns the path of a spec file referring to it.
pub fn forge_fixture(root: &std::path::Path) -> std::path::PathBuf {
    use constyle_core::image::save_image;
    let dirs = ["paired/input", "paired/target", "clean"];
    for d in dirs {
        std::fs::create_dir_all(root.join(d)).unwrap();
    }
    for (i, (w, h)) in [(96usize, 80usize), (70, 64), (40, 30)].into_iter().enumerate() {
        let target = test_card(h, w);
        let input = target.map(|v| (v * 0.7 + 0.1).clamp(0.0, 1.0));
        save_image(&target, root.join(format!("paired/target/img{i}.png"))).unwrap();
        save_image(&input, root.join(format!("paired/input/img{i}.png"))).unwrap();
        save_image(&test_card(w, h), root.join(format!("clean/c{i}.png"))).unwrap();
    }
    let spec = serde_json::json!({
        "schema_version": 1,
        "tasks": [
            {"task": "deblur", "input_dir": "paired/input", "target_dir": "paired/target", "crop": 32, "step": 20},
            {"task": "denoise", "target_dir": "clean", "paired": false, "crop": 32, "step": 24,
             "synthetic": {"kind": "denoise"}},
            {"task": "jpeg", "target_dir": "clean", "paired": false, "crop": 32, "step": 30,
             "synthetic": {"kind": "jpeg"}, "exclude": ["c2*"]}
        ]
    });
    let path = root.join("spec.json");
    std::fs::write(&path, serde_json::to_string_pretty(&spec).unwrap()).unwrap();
    path
}

/// Every regular file under `dir`, as (relative path, bytes), sorted.
pub fn tree_bytes(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    fn walk(base: &std::path::Path, dir: &std::path::Path, out: &mut Vec<(String, Vec<u8>)>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(base, &p, out);
            } else {
                let rel = p.strip_prefix(base).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}

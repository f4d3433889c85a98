//! Numeric self-checks: dense oracle, finite differences, timing.

use std::collections::BTreeMap;
use std::time::Instant;

use clap::{Args, ValueEnum};
use ndarray::{Array2, ArrayView2};
use permutofilt::bi_explicit::InceptionModule;
use permutofilt::densecrf::{mf_backward, mf_run, mf_run_recorded, CrfModel, KernelSchedule, PairwiseKernel, Unaries};
use permutofilt::lattice::{embed, enumerate_neighbors, find_simplex, FeatureVector, LatticeKey};
use permutofilt::permuto::{convolve_lattice, gaussian_init, FilterBank, LatticeOperators, DEFAULT_CHUNK};
use permutofilt::training::{grad_check, GradCheck};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Failure, Global, Outcome};

fn random(rng: &mut impl Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(lo..hi))
}

fn random_bank(rng: &mut impl Rng, d: usize, s: usize, c_out: usize, c_in: usize) -> Result<FilterBank, Failure> {
    let len = FilterBank::zeros(d, s, c_out, c_in)
        .map_err(|e| Failure::Usage(e.to_string()))?
        .weights()
        .len();
    let w = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Ok(FilterBank::from_weights(d, s, c_out, c_in, w)?)
}

fn check_dims(n: usize, d: usize) -> Outcome {
    if n == 0 || d == 0 {
        return Err(Failure::Usage("--n and --d must be positive".into()));
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    /// Number of input (and output) points.
    #[arg(long, default_value_t = 30)]
    pub n: usize,
    #[arg(long, default_value_t = 2)]
    pub d: usize,
    #[arg(long, default_value_t = 1)]
    pub s: usize,
    /// Channels in and out.
    #[arg(long, default_value_t = 2)]
    pub c: usize,
}

/// Vertices and barycentric weights of each row, from the per-point
/// lattice primitives.
fn enclosures(f: ArrayView2<f64>) -> Result<Vec<(Vec<LatticeKey>, Vec<f64>)>, Failure> {
    f.outer_iter()
        .map(|row| {
            let enc = find_simplex(&embed(&FeatureVector::new(row.to_vec())?)?)?;
            Ok((enc.vertices, enc.barycentric))
        })
        .collect()
}

/// `S_slice B S_splat x` with every matrix written out.
fn dense_filter(
    x: ArrayView2<f64>,
    f_in: ArrayView2<f64>,
    f_out: ArrayView2<f64>,
    bank: &FilterBank,
) -> Result<Array2<f64>, Failure> {
    let mut order: BTreeMap<LatticeKey, usize> = BTreeMap::new();
    let mut keys = Vec::new();
    let ins = enclosures(f_in)?;
    for (verts, _) in &ins {
        for v in verts {
            order.entry(v.clone()).or_insert_with(|| {
                keys.push(v.clone());
                keys.len() - 1
            });
        }
    }
    let m = keys.len();
    let mut splat = Array2::<f64>::zeros((m, f_in.nrows()));
    for (i, (verts, w)) in ins.iter().enumerate() {
        for (v, w) in verts.iter().zip(w) {
            splat[[order[v], i]] += w;
        }
    }
    let mut slice = Array2::<f64>::zeros((f_out.nrows(), m));
    for (i, (verts, w)) in enclosures(f_out)?.iter().enumerate() {
        for (v, w) in verts.iter().zip(w) {
            if let Some(&j) = order.get(v) {
                slice[[i, j]] += w;
            }
        }
    }
    let neighbours: Vec<Vec<LatticeKey>> = keys
        .iter()
        .map(|k| enumerate_neighbors(k, bank.hops()))
        .collect::<Result<_, _>>()?;
    let mut out = Array2::zeros((f_out.nrows(), bank.c_out()));
    for co in 0..bank.c_out() {
        for ci in 0..bank.c_in() {
            let mut blur = Array2::<f64>::zeros((m, m));
            for (j, nbrs) in neighbours.iter().enumerate() {
                for (k, nb) in nbrs.iter().enumerate() {
                    if let Some(&src) = order.get(nb) {
                        blur[[j, src]] += bank.get(co, ci, k);
                    }
                }
            }
            let col = slice.dot(&blur.dot(&splat.dot(&x.column(ci))));
            let mut dst = out.column_mut(co);
            dst += &col;
        }
    }
    Ok(out)
}

/// `max |a - b| / max |b|`.
fn max_rel_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    a.iter()
        .zip(b)
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs() / scale))
}

/// Max relative error of the sparse filter against the dense product on
/// one random configuration.
pub fn oracle_error(n: usize, d: usize, s: usize, c: usize, seed: u64) -> Result<f64, Failure> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f_in = random(&mut rng, n, d, -2.0, 2.0);
    // Half the outputs sit on inputs, half anywhere nearby.
    let mut f_out = random(&mut rng, n, d, -2.5, 2.5);
    for i in (0..n).step_by(2) {
        f_out.row_mut(i).assign(&f_in.row(i));
    }
    let x = random(&mut rng, n, c, -1.0, 1.0);
    let bank = random_bank(&mut rng, d, s, c, c)?;
    let ops = LatticeOperators::new(f_in.view(), f_out.view(), &vec![1.0; d], s)?;
    let sparse = ops.forward(x.view(), &bank)?;
    let dense = dense_filter(x.view(), f_in.view(), f_out.view(), &bank)?;
    Ok(max_rel_diff(&sparse, &dense))
}

pub fn oracle_diff(g: &Global, a: OracleArgs) -> Outcome {
    check_dims(a.n, a.d)?;
    if a.c == 0 {
        return Err(Failure::Usage("--c must be positive".into()));
    }
    println!("{:.3e}", oracle_error(a.n, a.d, a.s, a.c, g.seed)?);
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Target {
    /// Filter weights of the lattice convolution.
    Filter,
    /// Input values of the lattice convolution.
    Input,
    /// Unaries, filter and kernel weight through two mean-field steps.
    Mf,
    /// Values, combination weights, widths and feature transform of the
    /// explicit multi-scale layer.
    Inception,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, value_enum)]
    pub target: Target,
    #[arg(long, default_value_t = 2)]
    pub d: usize,
    #[arg(long, default_value_t = 1)]
    pub s: usize,
    #[arg(long, default_value_t = 12)]
    pub n: usize,
    /// Channels (labels for mf, at least 2).
    #[arg(long, default_value_t = 2)]
    pub c: usize,
}

fn inner(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    (a * b).sum()
}

/// Max relative error between analytic and central-difference gradients
/// of a random linear functional of the target's output.
pub fn gradcheck_error(target: Target, n: usize, d: usize, s: usize, c: usize, seed: u64) -> Result<f64, Failure> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = random(&mut rng, n, d, -1.5, 1.5);
    let unit = vec![1.0; d];
    let cfg = GradCheck {
        seed,
        ..GradCheck::default()
    };
    let report = match target {
        Target::Filter | Target::Input => {
            let ops = LatticeOperators::new(f.view(), f.view(), &unit, s)?;
            let x = random(&mut rng, n, c, -1.0, 1.0);
            let up = random(&mut rng, n, c, -1.0, 1.0);
            let bank = random_bank(&mut rng, d, s, c, c)?;
            if target == Target::Filter {
                let g = ops.grad_filter(up.view(), x.view(), &bank)?;
                let loss = |w: &[f64]| {
                    let b = FilterBank::from_weights(d, s, c, c, w.to_vec()).expect("fixed shape");
                    inner(&ops.forward(x.view(), &b).expect("fixed shape"), &up)
                };
                grad_check(loss, bank.weights(), g.weights(), &cfg)?
            } else {
                let g = ops.grad_input(up.view(), &bank)?;
                let loss = |v: &[f64]| {
                    let xv = ArrayView2::from_shape((n, c), v).expect("fixed shape");
                    inner(&ops.forward(xv, &bank).expect("fixed shape"), &up)
                };
                let flat: Vec<f64> = x.iter().copied().collect();
                grad_check(loss, &flat, g.as_slice().expect("standard layout"), &cfg)?
            }
        }
        Target::Mf => {
            let l = c.max(2);
            let u0 = random(&mut rng, n, l, -1.0, 1.0);
            let up = random(&mut rng, n, l, -1.0, 1.0);
            let mut bank = gaussian_init(d, s, 1.0)?;
            for w in bank.weights_mut() {
                *w += rng.gen_range(-0.1..0.1);
            }
            let taps = bank.weights().len();
            let model_for = |b: FilterBank, weight: f64| -> CrfModel {
                let k = PairwiseKernel::lattice(f.view(), &unit, b, weight).expect("valid kernel");
                let mut m = CrfModel::potts(l, KernelSchedule::Shared(vec![k]));
                m.exclude_self = true;
                m
            };
            let weight = 1.3;
            let model = model_for(bank.clone(), weight);
            let unaries = Unaries::new(u0.clone())?;
            let trace = mf_run_recorded(&unaries, &model, 2)?;
            let grads = mf_backward(&trace, &model, up.view())?;
            let mut analytic: Vec<f64> = grads.unaries.iter().copied().collect();
            analytic.extend_from_slice(grads.filters[0][0].as_ref().expect("lattice kernel").weights());
            analytic.push(grads.kernel_weights[0][0]);
            let mut params: Vec<f64> = u0.iter().copied().collect();
            params.extend_from_slice(bank.weights());
            params.push(weight);
            let loss = |p: &[f64]| {
                let u = Array2::from_shape_vec((n, l), p[..n * l].to_vec()).expect("fixed shape");
                let b = FilterBank::from_weights(d, s, 1, 1, p[n * l..n * l + taps].to_vec()).expect("fixed shape");
                let m = model_for(b, p[n * l + taps]);
                let q = mf_run(&Unaries::new(u).expect("finite"), &m, 2).expect("valid model");
                inner(&q.q, &up)
            };
            grad_check(loss, &params, &analytic, &cfg)?
        }
        Target::Inception => {
            let h = 3;
            let q = n.saturating_sub(2).max(1);
            let f_out = random(&mut rng, q, d, -1.5, 1.5);
            let z = random(&mut rng, n, c, -1.0, 1.0);
            let up = random(&mut rng, q, c, -1.0, 1.0);
            let lambda = Array2::eye(d) + random(&mut rng, d, d, -0.3, 0.3);
            let thetas = vec![1.0, 0.7, 0.3];
            let w = random(&mut rng, h, c, 0.0, 1.0);
            let mut module = InceptionModule::new(lambda.clone(), thetas.clone(), w.clone())?;
            module.forward(z.view(), f.view(), f_out.view())?;
            let g = module.backward(up.view())?;
            let sizes = [n * c, h * c, h, d * d];
            let mut analytic: Vec<f64> = g.z.iter().copied().collect();
            analytic.extend(g.w.iter().copied());
            analytic.extend_from_slice(&g.theta);
            analytic.extend(g.lambda.iter().copied());
            let mut params: Vec<f64> = z.iter().copied().collect();
            params.extend(w.iter().copied());
            params.extend_from_slice(&thetas);
            params.extend(lambda.iter().copied());
            let loss = |p: &[f64]| {
                let mut at = 0;
                let mut take = |len: usize| {
                    at += len;
                    p[at - len..at].to_vec()
                };
                let zv = Array2::from_shape_vec((n, c), take(sizes[0])).expect("fixed shape");
                let wv = Array2::from_shape_vec((h, c), take(sizes[1])).expect("fixed shape");
                let tv = take(sizes[2]);
                let lv = Array2::from_shape_vec((d, d), take(sizes[3])).expect("fixed shape");
                let mut m = InceptionModule::new(lv, tv, wv).expect("valid module");
                inner(&m.forward(zv.view(), f.view(), f_out.view()).expect("fixed shape"), &up)
            };
            grad_check(loss, &params, &analytic, &cfg)?
        }
    };
    Ok(report.max_rel_err)
}

pub fn gradcheck(g: &Global, a: GradcheckArgs) -> Outcome {
    check_dims(a.n, a.d)?;
    if a.c == 0 {
        return Err(Failure::Usage("--c must be positive".into()));
    }
    let err = gradcheck_error(a.target, a.n, a.d, a.s, a.c, g.seed)?;
    println!("{err:.3e}");
    if err < GradCheck::default().tolerance {
        Ok(())
    } else {
        Err(Failure::Data(format!("gradient check failed: max relative error {err:.3e}")))
    }
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 20_000)]
    pub n: usize,
    #[arg(long, default_value_t = 3)]
    pub d: usize,
    #[arg(long, default_value_t = 1)]
    pub s: usize,
    #[arg(long, default_value_t = 3)]
    pub c: usize,
    #[arg(long, default_value_t = 5)]
    pub repeat: usize,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var.sqrt())
}

/// Wall time per stage on random points; `--out` also gets them as
/// `stage,mean_ms,std_ms` rows.
pub fn bench(g: &Global, a: BenchArgs) -> Outcome {
    check_dims(a.n, a.d)?;
    if a.repeat == 0 || a.c == 0 {
        return Err(Failure::Usage("--repeat and --c must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(g.seed);
    let f = random(&mut rng, a.n, a.d, 0.0, (a.n as f64).powf(1.0 / a.d as f64));
    let x = random(&mut rng, a.n, a.c, 0.0, 1.0);
    let bank = random_bank(&mut rng, a.d, a.s, a.c, a.c)?;
    let stages = ["build", "splat", "blur", "slice", "backward"];
    let mut times = vec![Vec::with_capacity(a.repeat); stages.len()];
    let mut vertices = 0;
    for _ in 0..a.repeat {
        let t = Instant::now();
        let ops = LatticeOperators::new(f.view(), f.view(), &vec![1.0; a.d], a.s)?;
        times[0].push(t.elapsed().as_secs_f64());
        vertices = ops.num_vertices();

        let t = Instant::now();
        let lattice = ops.splat.splat(x.view())?;
        times[1].push(t.elapsed().as_secs_f64());
        let t = Instant::now();
        let blurred = convolve_lattice(lattice.view(), &ops.blur, &bank, DEFAULT_CHUNK)?;
        times[2].push(t.elapsed().as_secs_f64());
        let t = Instant::now();
        let y = ops.slice.slice(blurred.view())?;
        times[3].push(t.elapsed().as_secs_f64());
        let t = Instant::now();
        ops.grad_input(y.view(), &bank)?;
        ops.grad_filter(y.view(), x.view(), &bank)?;
        times[4].push(t.elapsed().as_secs_f64());
    }
    println!("n={} d={} s={} c={} vertices={vertices} repeat={}", a.n, a.d, a.s, a.c, a.repeat);
    let mut csv = String::from("stage,mean_ms,std_ms\n");
    for (name, ts) in stages.iter().zip(&times) {
        let (m, sd) = mean_std(ts);
        println!("{name:>9}: {:.3} ± {:.3} ms", m * 1e3, sd * 1e3);
        csv.push_str(&format!("{name},{:.3},{:.3}\n", m * 1e3, sd * 1e3));
    }
    if let Some(p) = &g.out {
        std::fs::write(p, csv).map_err(|e| Failure::Data(format!("{}: {e}", p.display())))?;
    }
    Ok(())
}

//! Oracles and checkers shared by the integration tests and the acceptance
//! harness.

#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use ffdc::nn::{BoolMask, Tape, Tensor2D, Var};
use ffdc::sim::{Latent, ACTION_DIM, LATENT_DIM};
use ffdc::verifier::{build_mask, parse_mask_dump, Ablation, Block, MaskMode, Verifier, VerifierConfig, VerifierInput, VerifierLayout};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;
pub const N_SEMANTIC: usize = 2;
pub const GOLDEN_CASES: [(usize, usize); 4] = [(4, 2), (4, 4), (8, 2), (8, 4)];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------- masks

/// Visibility matrix enumerated slot by slot, independent of the library's
/// token timing. Latent `j` (1-based) sits at time `j·r`, action `i` at `i`.
pub fn mask_oracle(n_l: usize, k: usize, r: usize, w: usize, mode: MaskMode) -> Vec<Vec<bool>> {
    let m = k / r;
    let n = n_l + m + 1 + m + k + 1;
    let o = n_l + m;
    let lat = |j: usize| o + j; // j in 1..=m
    let act = |i: usize| o + m + i; // i in 1..=k
    let cls = n - 1;
    let mut v = vec![vec![false; n]; n];
    let prefix: Vec<usize> = (0..o).collect();
    for &a in &prefix {
        for &b in &prefix {
            v[a][b] = true;
        }
    }
    for &b in &prefix {
        v[o][b] = true;
    }
    v[o][o] = true;
    let ff = mode == MaskMode::FullFidelity;
    for j in 1..=m {
        let row = lat(j);
        for &b in &prefix {
            v[row][b] = true;
        }
        v[row][o] = ff;
        for jj in 1..=j {
            if (j - jj) * r <= w {
                v[row][lat(jj)] = true;
            }
        }
        for i in 1..=(j * r) {
            if j * r - i <= w {
                v[row][act(i)] = true;
            }
        }
    }
    for i in 1..=k {
        let row = act(i);
        for &b in &prefix {
            v[row][b] = true;
        }
        v[row][o] = ff;
        for j in 1..=m {
            if j * r <= i && i - j * r <= w {
                v[row][lat(j)] = true;
            }
        }
        for ii in 1..=i {
            if i - ii <= w {
                v[row][act(ii)] = true;
            }
        }
    }
    v[cls] = vec![true; n];
    v
}

pub fn oracle_bool_mask(n_l: usize, k: usize, r: usize, w: usize, mode: MaskMode) -> BoolMask {
    let rows = mask_oracle(n_l, k, r, w, mode);
    let mut m = BoolMask::new(rows.len());
    for (i, row) in rows.iter().enumerate() {
        for (j, &b) in row.iter().enumerate() {
            m.set(i, j, b);
        }
    }
    m
}

/// Golden cases: the cache-compatible mask at `w = k` and the full-fidelity
/// mask at the narrowest window `w = r`.
pub fn golden_window(k: usize, r: usize, mode: MaskMode) -> usize {
    match mode {
        MaskMode::CacheCompatible => k,
        MaskMode::FullFidelity => r,
    }
}

pub fn golden_path(k: usize, r: usize, mode: MaskMode) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(format!("mask_k{k}_r{r}_{}.txt", mode.name()))
}

/// Compare `build_mask` against the golden file and the oracle.
pub fn golden_check(k: usize, r: usize, mode: MaskMode) -> Result<(), String> {
    let w = golden_window(k, r, mode);
    let layout = VerifierLayout::new(N_SEMANTIC, k, r, Ablation::Full).map_err(|e| e.to_string())?;
    let built = build_mask(&layout, w, mode).map_err(|e| e.to_string())?;
    let path = golden_path(k, r, mode);
    let text = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    let golden = parse_mask_dump(&text).map_err(|e| e.to_string())?;
    if golden != oracle_bool_mask(N_SEMANTIC, k, r, w, mode) {
        return Err(format!("golden file {} disagrees with the oracle", path.display()));
    }
    if built.bits != golden || built.dump() != text {
        return Err(format!("build_mask differs from {}", path.display()));
    }
    Ok(())
}

/// Perturb every future latent and action in turn: hidden states of the
/// prefix, `O_t` and every future token timed earlier stay bit-identical,
/// and something downstream changes. Returns the number of slots checked.
pub fn leakage_check(k: usize, r: usize, mode: MaskMode, seed: u64) -> Result<usize, String> {
    let mut rng = rng(seed);
    let cfg = VerifierConfig { k, ratio: r, window: k, mode, ..small_verifier_config() };
    let v = Verifier::new(cfg.clone(), seed).map_err(|e| e.to_string())?;
    let l = *v.layout();
    let base = random_input(&mut rng, &cfg);
    let h0 = v.hidden_states(&base, v.mask()).map_err(|e| e.to_string())?;
    let mut slots = 0;
    for p in l.range(Block::FutureLatent).chain(l.range(Block::Action)) {
        let mut x = base.clone();
        if l.block_of(p) == Block::FutureLatent {
            x.future[p - l.start(Block::FutureLatent)] = random_latent(&mut rng);
        } else {
            x.actions[p - l.start(Block::Action)] = [0; ACTION_DIM].map(|_| rng.random_range(-1.0..1.0));
        }
        let h = v.hidden_states(&x, v.mask()).map_err(|e| e.to_string())?;
        let tp = l.time(p).expect("future tokens are timed");
        let mut changed = false;
        for q in 0..l.len() {
            let blind = match l.block_of(q) {
                Block::Semantic | Block::PastLatent | Block::Real => true,
                Block::FutureLatent | Block::Action => l.time(q).expect("timed") < tp,
                Block::Cls => false,
            };
            for (a, b) in h0.iter().zip(&h) {
                if blind && a.row(q) != b.row(q) {
                    return Err(format!("k={k} r={r} {}: token {q} saw later token {p}", mode.name()));
                }
                changed |= a.row(q) != b.row(q);
            }
        }
        if !changed {
            return Err(format!("perturbing token {p} changed nothing"));
        }
        slots += 1;
    }
    Ok(slots)
}

// ---------------------------------------------------------- gradients

pub fn random_tensor(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor2D {
    Tensor2D::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Random visibility with a full diagonal so every row sees a key.
pub fn random_mask(rng: &mut impl Rng, n: usize) -> BoolMask {
    let mut m = BoolMask::new(n);
    for i in 0..n {
        for j in 0..n {
            m.set(i, j, i == j || rng.random_bool(0.5));
        }
    }
    m
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Analytic vs central-difference gradients of a scalar graph with respect
/// to every element of every input.
pub fn check_graph(inputs: &[Tensor2D], f: &dyn Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let eval = |xs: &[Tensor2D]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.input(x.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).get(0, 0)
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.input(x.clone())).collect();
    let out = f(&mut tape, &vars);
    let grads = tape.backward(out);
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (k, x) in inputs.iter().enumerate() {
        let g = grads.get(vars[k]).cloned().unwrap_or_else(|| Tensor2D::zeros(x.rows(), x.cols()));
        for e in 0..x.data().len() {
            let mut xs = inputs.to_vec();
            xs[k].data_mut()[e] += FD_STEP;
            let up = eval(&xs);
            xs[k].data_mut()[e] -= 2.0 * FD_STEP;
            let down = eval(&xs);
            analytic.push(g.data()[e]);
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
    }
    rel_err(&analytic, &numeric)
}

/// Reduce a tensor to a scalar through a squared error against a random
/// target, so every output element carries a distinct weight.
fn reduce(tape: &mut Tape, y: Var, target: &Tensor2D) -> Var {
    tape.mse(y, target, 1.0)
}

/// One random instance of every tape operation. Returns `(name, rel_err)`.
pub fn op_instances(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = rng(seed);
    let r = rng.random_range(2..5);
    let c = rng.random_range(2..6);
    let m = rng.random_range(2..5);
    let mut out = Vec::new();
    let t_rc = random_tensor(&mut rng, r, c);

    let inputs = [random_tensor(&mut rng, r, m), random_tensor(&mut rng, m, c)];
    let tg = t_rc.clone();
    out.push((
        "matmul",
        check_graph(&inputs, &|t, v| {
            let y = t.matmul(v[0], v[1]);
            reduce(t, y, &tg)
        }),
    ));

    let inputs = [random_tensor(&mut rng, r, c), random_tensor(&mut rng, 1, c)];
    let tg = t_rc.clone();
    out.push((
        "add_bias",
        check_graph(&inputs, &|t, v| {
            let y = t.add_bias(v[0], v[1]);
            reduce(t, y, &tg)
        }),
    ));

    let inputs = [random_tensor(&mut rng, r, m), random_tensor(&mut rng, m, c), random_tensor(&mut rng, 1, c)];
    let tg = t_rc.clone();
    out.push((
        "linear",
        check_graph(&inputs, &|t, v| {
            let y = t.linear(v[0], v[1], v[2]);
            reduce(t, y, &tg)
        }),
    ));

    let inputs = [random_tensor(&mut rng, r, c), random_tensor(&mut rng, r, c)];
    let tg = t_rc.clone();
    out.push((
        "add",
        check_graph(&inputs, &|t, v| {
            let y = t.add(v[0], v[1]);
            reduce(t, y, &tg)
        }),
    ));

    let s: f64 = rng.random_range(-2.0..2.0);
    let inputs = [random_tensor(&mut rng, r, c)];
    let tg = t_rc.clone();
    out.push((
        "scale",
        check_graph(&inputs, &|t, v| {
            let y = t.scale(v[0], s);
            reduce(t, y, &tg)
        }),
    ));

    let inputs = [random_tensor(&mut rng, r, c)];
    let tg = t_rc.clone();
    out.push((
        "gelu",
        check_graph(&inputs, &|t, v| {
            let y = t.gelu(v[0]);
            reduce(t, y, &tg)
        }),
    ));

    let inputs = [random_tensor(&mut rng, r, c)];
    let tg = t_rc.clone();
    out.push((
        "tanh",
        check_graph(&inputs, &|t, v| {
            let y = t.tanh(v[0]);
            reduce(t, y, &tg)
        }),
    ));

    let inputs = [random_tensor(&mut rng, r, c), random_tensor(&mut rng, 1, c), random_tensor(&mut rng, 1, c)];
    let tg = t_rc.clone();
    out.push((
        "layer_norm",
        check_graph(&inputs, &|t, v| {
            let y = t.layer_norm(v[0], v[1], v[2]);
            reduce(t, y, &tg)
        }),
    ));

    // Two stacked sequences of n tokens sharing one random mask.
    let n = rng.random_range(3..7);
    let heads = 2;
    let width = 2 * rng.random_range(1..4);
    let mask = Arc::new(random_mask(&mut rng, n));
    let inputs = [random_tensor(&mut rng, 2 * n, width), random_tensor(&mut rng, 2 * n, width), random_tensor(&mut rng, 2 * n, width)];
    let tg = random_tensor(&mut rng, 2 * n, width);
    out.push((
        "attention",
        check_graph(&inputs, &|t, v| {
            let y = t.attention(v[0], v[1], v[2], Arc::clone(&mask), heads).expect("valid mask");
            reduce(t, y, &tg)
        }),
    ));

    let inputs = [random_tensor(&mut rng, r, c), random_tensor(&mut rng, m, c)];
    let tg = random_tensor(&mut rng, r + m, c);
    out.push((
        "concat_rows",
        check_graph(&inputs, &|t, v| {
            let y = t.concat_rows(&[v[0], v[1]]);
            reduce(t, y, &tg)
        }),
    ));

    let idx: Vec<usize> = (0..r + 1).map(|_| rng.random_range(0..r)).collect();
    let inputs = [random_tensor(&mut rng, r, c)];
    let tg = random_tensor(&mut rng, r + 1, c);
    out.push((
        "gather_rows",
        check_graph(&inputs, &|t, v| {
            let y = t.gather_rows(v[0], &idx);
            reduce(t, y, &tg)
        }),
    ));

    let w: f64 = rng.random_range(0.1..2.0);
    let inputs = [random_tensor(&mut rng, r, c)];
    let tg = t_rc.clone();
    out.push(("mse", check_graph(&inputs, &|t, v| t.mse(v[0], &tg, w))));

    let labels: Vec<f64> = (0..r).map(|_| f64::from(rng.random_range(0..2u8))).collect();
    let inputs = [random_tensor(&mut rng, r, 1).scale_into(3.0)];
    out.push(("bce_with_logits", check_graph(&inputs, &|t, v| t.bce_with_logits(v[0], &labels))));
    out
}

trait ScaleInto {
    fn scale_into(self, s: f64) -> Self;
}

impl ScaleInto for Tensor2D {
    fn scale_into(mut self, s: f64) -> Self {
        self.data_mut().iter_mut().for_each(|x| *x *= s);
        self
    }
}

pub fn small_verifier_config() -> VerifierConfig {
    VerifierConfig { width: 8, head_hidden: 6, heads: 2, k: 4, ratio: 2, window: 4, ..VerifierConfig::default() }
}

pub fn random_latent(rng: &mut impl Rng) -> Latent {
    Latent((0..LATENT_DIM).map(|_| rng.random_range(-1.0..1.0)).collect())
}

pub fn random_input(rng: &mut impl Rng, cfg: &VerifierConfig) -> VerifierInput {
    let l = cfg.layout().expect("valid layout");
    VerifierInput {
        semantic: (0..l.n_l).map(|_| random_latent(rng)).collect(),
        past: (0..l.k / l.r).map(|_| random_latent(rng)).collect(),
        past_pad: (0..l.k / l.r).map(|_| rng.random_bool(0.3)).collect(),
        real: random_latent(rng),
        future: (0..l.k / l.r).map(|_| random_latent(rng)).collect(),
        actions: (0..l.k).map(|_| [0; ACTION_DIM].map(|_| rng.random_range(-1.0..1.0))).collect(),
    }
}

/// Composed verifier under a random mask: BCE on a two-sample batch,
/// analytic parameter gradients vs central differences on `coords` random
/// parameter coordinates.
pub fn verifier_instance(seed: u64, coords: usize) -> f64 {
    let mut rng = rng(seed);
    let cfg = small_verifier_config();
    let mut v = Verifier::new(cfg.clone(), seed).expect("valid config");
    let n = v.layout().len();
    let mask = Arc::new(random_mask(&mut rng, n));
    let xs = [random_input(&mut rng, &cfg), random_input(&mut rng, &cfg)];
    let labels = [1.0, 0.0];
    let loss = |v: &Verifier| {
        let mut tape = Tape::new();
        let (z, _) = v.logits_on_tape(&mut tape, &[&xs[0], &xs[1]], &mask).expect("forward");
        let l = tape.bce_with_logits(z, &labels);
        (tape, l)
    };
    v.store_mut().zero_grad();
    {
        let (tape, l) = loss(&v);
        let grads = tape.backward(l);
        tape.accumulate(&grads, v.store_mut());
    }
    let names: Vec<String> = v.store().iter().map(|p| p.name.clone()).collect();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for _ in 0..coords {
        let name = &names[rng.random_range(0..names.len())];
        let id = v.store().id(name).expect("named parameter");
        let e = rng.random_range(0..v.store().value(id).data().len());
        analytic.push(v.store().grad(id).data()[e]);
        let orig = v.store().value(id).data()[e];
        let mut value_at = |x: f64| {
            v.store_mut().value_mut(id).data_mut()[e] = x;
            let (tape, l) = loss(&v);
            tape.value(l).get(0, 0)
        };
        let up = value_at(orig + FD_STEP);
        let down = value_at(orig - FD_STEP);
        value_at(orig);
        numeric.push((up - down) / (2.0 * FD_STEP));
    }
    rel_err(&analytic, &numeric)
}

// ---------------------------------------------------------- pipeline

pub fn smoke_config() -> ffdc::pipeline::RunConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs/smoke.json");
    ffdc::pipeline::RunConfig::load(&path).expect("smoke config loads")
}

/// Run every stage of `cfg` into `out` for the full verifier.
pub fn run_all(cfg: &ffdc::pipeline::RunConfig, out: &std::path::Path) -> Result<(), ffdc::pipeline::PipelineError> {
    use ffdc::verifier::Ablation;
    let p = ffdc::pipeline::Pipeline::new(cfg.clone(), Some(out.to_path_buf()), false)?;
    p.gen_demos()?;
    p.train_wam()?;
    p.build_verdata()?;
    p.train_verifier(Ablation::Full)?;
    p.benchmark(Ablation::Full, 1)?;
    p.report(Ablation::Full)?;
    Ok(())
}

pub fn random_rollout(rng: &mut impl Rng, h: usize, r: usize, origin: usize) -> ffdc::wam::PredictedRollout {
    ffdc::wam::PredictedRollout {
        task: ffdc::sim::TaskId::InsertHard,
        origin_step: origin,
        ratio: r,
        conditioning: random_latent(rng),
        actions: (0..h).map(|_| [rng.random_range(-0.03..0.03), rng.random_range(-0.03..0.03), rng.random_range(-1.0..1.0)]).collect(),
        latents: (0..h / r).map(|_| random_latent(rng)).collect(),
        semantic_tokens: (0..N_SEMANTIC).map(|_| random_latent(rng)).collect(),
        kv_cache: None,
    }
}

//! End-to-end acceptance checks. Each criterion prints one PASS or FAIL line;
//! the process exits non-zero if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use social_kernels::community::detect_communities;
use social_kernels::dataset::{generate_synthetic, SyntheticParams};
use social_kernels::eval::{
    report_without_timing, run_cross_validation, CfSimilarity, EvalConfig, Method, TuningConfig,
};
use social_kernels::graph::{IsolatedPolicy, SocialGraph};
use social_kernels::kernels::{
    commute_time_kernel, impact_distribution_kernel, validate_psd, KernelBank, KernelConfig,
    KernelLabel,
};
use social_kernels::nlmkl::{combine_matrices, fit_nlmkl, mkl_gradient, project_onto_m, MklConfig};
use social_kernels::svr::{dual_objective, train_svr, SvrConfig};

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn graph(n: usize, edges: &[(usize, usize)]) -> SocialGraph {
    SocialGraph::from_edges(n, edges.iter().copied()).unwrap()
}

fn cliques_with_bridge(size: usize) -> SocialGraph {
    let mut e = Vec::new();
    for base in [0, size] {
        for a in 0..size {
            for b in a + 1..size {
                e.push((base + a, base + b));
            }
        }
    }
    e.push((size - 1, size));
    graph(2 * size, &e)
}

fn path(n: usize) -> Vec<(usize, usize)> {
    (1..n).map(|i| (i - 1, i)).collect()
}

fn random_graph(n: usize, p: f64, seed: u64) -> SocialGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut e = path(n);
    for a in 0..n {
        for b in a + 2..n {
            if rng.random::<f64>() < p {
                e.push((a, b));
            }
        }
    }
    graph(n, &e)
}

/// Small connected graphs with at most 10 nodes.
fn small_corpus() -> Vec<(&'static str, SocialGraph)> {
    let star: Vec<_> = (1..7).map(|i| (0, i)).collect();
    let mut cycle = path(7);
    cycle.push((6, 0));
    vec![
        ("pair", graph(2, &[(0, 1)])),
        ("path5", graph(5, &path(5))),
        ("star7", graph(7, &star)),
        ("cycle7", graph(7, &cycle)),
        (
            "k4",
            graph(4, &[(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]),
        ),
        (
            "triangles",
            graph(6, &[(0, 1), (1, 2), (0, 2), (3, 4), (4, 5), (3, 5), (2, 3)]),
        ),
        ("cliques", cliques_with_bridge(5)),
        ("random8", random_graph(8, 0.3, 1)),
        ("random10", random_graph(10, 0.25, 2)),
    ]
}

fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).abs().max()
}

/// `(1−α) Σ_k (αPᵀ)^k`, summed until the terms vanish, then `RᵀR`.
fn neumann_id(g: &SocialGraph, alpha: f64) -> DMatrix<f64> {
    let n = g.node_count();
    let mut p = DMatrix::zeros(n, n);
    for v in 0..n {
        let d = g.degree(v) as f64;
        for &u in g.neighbors(v) {
            p[(v, u)] = 1.0 / d;
        }
    }
    let step = p.transpose() * alpha;
    let mut term = DMatrix::identity(n, n) * (1.0 - alpha);
    let mut r = term.clone();
    while term.abs().max() > 1e-18 {
        term = &step * &term;
        r += &term;
    }
    r.transpose() * r
}

fn criterion_1() -> Check {
    let pair = graph(2, &[(0, 1)]);
    let id = impact_distribution_kernel(&pair, 0.5, IsolatedPolicy::Reject).unwrap();
    let want = DMatrix::from_row_slice(2, 2, &[5.0 / 9.0, 4.0 / 9.0, 4.0 / 9.0, 5.0 / 9.0]);
    let e = max_abs_diff(&id.matrix, &want);
    ensure!(e <= 1e-10, "2-node K_ID off by {e:e}");

    let mut worst: f64 = 0.0;
    for (name, g) in small_corpus() {
        for alpha in [0.1, 0.5, 0.85, 0.95] {
            let k = impact_distribution_kernel(&g, alpha, IsolatedPolicy::Reject).unwrap();
            let e = max_abs_diff(&k.matrix, &neumann_id(&g, alpha));
            ensure!(e <= 1e-10, "K_ID on {name} at alpha {alpha} off by {e:e}");
            worst = worst.max(e);
        }
    }

    let ct = commute_time_kernel(&pair);
    let want = DMatrix::from_row_slice(2, 2, &[0.25, -0.25, -0.25, 0.25]);
    let e = max_abs_diff(&ct.matrix, &want);
    ensure!(e <= 1e-10, "2-node K_CT off by {e:e}");
    let mut mp: f64 = 0.0;
    for (name, g) in small_corpus() {
        let l = g.laplacian();
        let k = commute_time_kernel(&g).matrix;
        let e1 = max_abs_diff(&(&l * &k * &l), &l);
        let e2 = max_abs_diff(&(&k * &l * &k), &k);
        ensure!(
            e1 <= 1e-8 && e2 <= 1e-8,
            "Moore-Penrose identities on {name}: {e1:e}, {e2:e}"
        );
        mp = mp.max(e1).max(e2);
    }
    Ok(format!(
        "Neumann max error {worst:.1e}, Moore-Penrose max error {mp:.1e}"
    ))
}

/// Smallest eigenvalue, or why the matrix fails at tol 1e-8.
fn psd(m: &DMatrix<f64>, what: &str) -> Result<f64, String> {
    let r = validate_psd(m, 1e-8).map_err(|e| format!("{what}: {e}"))?;
    ensure!(r.pass, "{what}: smallest eigenvalue {:e}", r.min_eig);
    Ok(r.min_eig)
}

fn criterion_2() -> Check {
    let d = generate_synthetic(&SyntheticParams::default()).unwrap();
    let bank = KernelBank::build(&d, &KernelConfig::default(), None).unwrap();
    let mut min_eig = f64::INFINITY;
    for k in bank.kernels() {
        min_eig = min_eig.min(psd(&k.matrix, &k.label.to_string())?);
    }
    let ks = bank.kernels();
    let mut products = 0;
    for a in 0..ks.len() {
        for b in a..ks.len() {
            let h = ks[a].hadamard(&ks[b]).unwrap();
            psd(&h.matrix, &format!("{} o {}", ks[a].label, ks[b].label))?;
            products += 1;
        }
    }
    let mats: Vec<&DMatrix<f64>> = ks.iter().map(|k| &k.matrix).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..6 {
        let eta: Vec<f64> = (0..mats.len())
            .map(|_| rng.random_range(0.0..2.0))
            .collect();
        let degree = if trial % 2 == 0 { 1 } else { 2 };
        let m = combine_matrices(&mats, &eta, degree).unwrap();
        psd(&m, &format!("combination {trial} (degree {degree})"))?;
    }
    Ok(format!(
        "{} kernels, {products} Hadamard products, 6 combinations; smallest kernel eigenvalue {min_eig:.2e}",
        ks.len()
    ))
}

/// Modularity straight from the definition.
fn oracle_q(g: &SocialGraph, labels: &[usize]) -> f64 {
    let m2 = 2.0 * g.edge_count() as f64;
    let mut q = 0.0;
    for i in 0..g.node_count() {
        for j in 0..g.node_count() {
            if labels[i] == labels[j] {
                let a = if g.has_edge(i, j) { 1.0 } else { 0.0 };
                q += a - (g.degree(i) * g.degree(j)) as f64 / m2;
            }
        }
    }
    q / m2
}

/// Best modularity over all set partitions (restricted growth strings).
fn exhaustive_q(g: &SocialGraph) -> f64 {
    fn rec(g: &SocialGraph, labels: &mut Vec<usize>, max: usize, best: &mut f64) {
        if labels.len() == g.node_count() {
            *best = best.max(oracle_q(g, labels));
            return;
        }
        for c in 0..=max + 1 {
            labels.push(c);
            rec(g, labels, max.max(c), best);
            labels.pop();
        }
    }
    let mut best = f64::NEG_INFINITY;
    let mut labels = vec![0];
    rec(g, &mut labels, 0, &mut best);
    best
}

fn criterion_3() -> Check {
    let g = cliques_with_bridge(5);
    let a = detect_communities(&g, 0);
    let truth: Vec<usize> = (0..10).map(|v| v / 5).collect();
    ensure!(
        a.community_count == 2,
        "found {} communities in the bridged cliques",
        a.community_count
    );
    ensure!(
        (0..10).all(|i| (0..10).all(|j| a.same_community(i, j) == (truth[i] == truth[j]))),
        "bridged cliques split as {:?}",
        a.labels
    );

    let star: Vec<_> = (1..7).map(|i| (0, i)).collect();
    let mut cycle = path(8);
    cycle.push((7, 0));
    let corpus = vec![
        (
            "triangles",
            graph(6, &[(0, 1), (1, 2), (0, 2), (3, 4), (4, 5), (3, 5), (2, 3)]),
        ),
        (
            "disjoint triangles",
            graph(6, &[(0, 1), (1, 2), (0, 2), (3, 4), (4, 5), (3, 5)]),
        ),
        (
            "k4",
            graph(4, &[(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]),
        ),
        ("path8", graph(8, &path(8))),
        ("cycle8", graph(8, &cycle)),
        ("star7", graph(7, &star)),
        (
            "squares",
            graph(
                8,
                &[
                    (0, 1),
                    (1, 2),
                    (2, 3),
                    (3, 0),
                    (4, 5),
                    (5, 6),
                    (6, 7),
                    (7, 4),
                    (3, 4),
                ],
            ),
        ),
        ("random7", random_graph(7, 0.35, 3)),
        ("random8a", random_graph(8, 0.3, 4)),
        ("random8b", random_graph(8, 0.45, 5)),
    ];
    let mut worst = f64::INFINITY;
    for (name, g) in &corpus {
        let opt = exhaustive_q(g);
        for seed in 0..5 {
            let a = detect_communities(g, seed);
            let q = oracle_q(g, &a.labels);
            if opt > 0.0 {
                ensure!(
                    q >= 0.95 * opt,
                    "{name} seed {seed}: Q {q:.5} vs optimum {opt:.5}"
                );
                worst = worst.min(q / opt);
            }
            ensure!(
                a.trace.windows(2).all(|w| w[1] >= w[0] - 1e-12),
                "{name}: modularity trace {:?} decreases",
                a.trace
            );
        }
    }

    let d = generate_synthetic(&SyntheticParams::default()).unwrap();
    let a = detect_communities(d.graph(), 0);
    ensure!(
        a.trace.windows(2).all(|w| w[1] >= w[0] - 1e-12),
        "500-user modularity trace {:?} decreases",
        a.trace
    );
    Ok(format!(
        "cliques recovered; worst ratio to optimum {worst:.4} over {} graphs",
        corpus.len()
    ))
}

fn random_psd(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n + 2, |_, _| rng.random_range(-1.0..1.0));
    &a * a.transpose() / n as f64 + DMatrix::identity(n, n) * 0.05
}

/// Projection onto `{0 ≤ a ≤ C, Σa⁺ − Σa⁻ = 0}` by bisection on the
/// equality multiplier.
fn project_box_balance(z: &[f64], l: usize, c: f64) -> Vec<f64> {
    let sign = |t: usize| if t < l { 1.0 } else { -1.0 };
    let at = |mu: f64| -> Vec<f64> {
        z.iter()
            .enumerate()
            .map(|(t, &v)| (v - mu * sign(t)).clamp(0.0, c))
            .collect()
    };
    let balance = |a: &[f64]| a.iter().enumerate().map(|(t, v)| sign(t) * v).sum::<f64>();
    let span = z.iter().fold(0.0f64, |m, v| m.max(v.abs())) + c + 1.0;
    let (mut lo, mut hi) = (-span, span);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if balance(&at(mid)) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    at(0.5 * (lo + hi))
}

/// Accelerated projected gradient on the `(a⁺, a⁻)` dual; returns `β` and
/// the dual objective.
fn reference_svr(k: &DMatrix<f64>, y: &[f64], c: f64, eps: f64) -> (Vec<f64>, f64) {
    let l = y.len();
    let lmax = k.clone().symmetric_eigenvalues().max();
    let step = 1.0 / (2.0 * lmax);
    let grad = |a: &[f64]| -> Vec<f64> {
        let beta: Vec<f64> = (0..l).map(|i| a[i] - a[i + l]).collect();
        let kb = k * DMatrix::from_column_slice(l, 1, &beta);
        (0..2 * l)
            .map(|t| {
                if t < l {
                    kb[t] + eps - y[t]
                } else {
                    -kb[t - l] + eps + y[t - l]
                }
            })
            .collect()
    };
    let (mut x, mut v, mut tk) = (vec![0.0; 2 * l], vec![0.0; 2 * l], 1.0f64);
    for _ in 0..30_000 {
        let g = grad(&v);
        let z: Vec<f64> = v.iter().zip(&g).map(|(a, b)| a - step * b).collect();
        let next = project_box_balance(&z, l, c);
        let tn = (1.0 + (1.0 + 4.0 * tk * tk).sqrt()) / 2.0;
        v = next
            .iter()
            .zip(&x)
            .map(|(a, b)| a + (tk - 1.0) / tn * (a - b))
            .collect();
        x = next;
        tk = tn;
    }
    let beta: Vec<f64> = (0..l).map(|i| x[i] - x[i + l]).collect();
    let kb = k * DMatrix::from_column_slice(l, 1, &beta);
    let f = beta.iter().zip(y).map(|(b, y)| b * y).sum::<f64>()
        - eps * x.iter().sum::<f64>()
        - 0.5 * beta.iter().zip(kb.iter()).map(|(b, q)| b * q).sum::<f64>();
    (beta, f)
}

/// SVR dual optimum of the degree-`degree` combination at `eta`.
fn dual_at(
    mats: &[&DMatrix<f64>],
    eta: &[f64],
    y: &[f64],
    svr: &SvrConfig,
) -> (f64, Vec<f64>, Vec<f64>) {
    let k = combine_matrices(mats, eta, 2).unwrap();
    let m = train_svr(&k, y, svr).unwrap();
    let f = dual_objective(&m, &k, y, svr.epsilon).unwrap();
    (f, m.alpha_plus, m.alpha_minus)
}

fn criterion_4() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let exact = SvrConfig {
        tol: 1e-11,
        max_passes: 200_000,
        clamp: false,
        ..SvrConfig::default()
    };

    // SVR feasibility and agreement with the reference QP.
    let mut qp_err: f64 = 0.0;
    for case in 0..8 {
        let k = random_psd(10, &mut rng);
        let y: Vec<f64> = (0..10).map(|_| rng.random_range(1.0..10.0)).collect();
        let c = [0.5, 1.0, 3.0, 10.0][case % 4];
        let eps = [0.0, 0.1, 0.5, 1.0][case / 2 % 4];
        let cfg = SvrConfig {
            c,
            epsilon: eps,
            ..exact
        };
        let m = train_svr(&k, &y, &cfg).unwrap();
        let balance: f64 = m.alpha_plus.iter().sum::<f64>() - m.alpha_minus.iter().sum::<f64>();
        ensure!(
            balance.abs() <= 1e-8,
            "case {case}: equality constraint off by {balance:e}"
        );
        for a in m.alpha_plus.iter().chain(&m.alpha_minus) {
            ensure!(
                *a >= -1e-8 && *a <= c + 1e-8,
                "case {case}: dual {a} outside [0, {c}]"
            );
        }
        let (beta, f_ref) = reference_svr(&k, &y, c, eps);
        let f = dual_objective(&m, &k, &y, eps).unwrap();
        ensure!(
            (f - f_ref).abs() <= 1e-6,
            "case {case}: dual {f} vs reference {f_ref}"
        );
        for (a, b) in m.beta.iter().zip(&beta) {
            ensure!(
                (a - b).abs() <= 1e-6,
                "case {case}: beta {a} vs reference {b}"
            );
            qp_err = qp_err.max((a - b).abs());
        }
    }

    // Gradient against central differences.
    let svr = SvrConfig {
        c: 2.0,
        epsilon: 0.3,
        ..exact
    };
    let mut grad_err: f64 = 0.0;
    for n in [10usize, 20] {
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let owned: Vec<DMatrix<f64>> = (0..4).map(|_| random_psd(n, &mut rng)).collect();
            let mats: Vec<&DMatrix<f64>> = owned.iter().collect();
            let y: Vec<f64> = (0..n).map(|_| rng.random_range(1.0..10.0)).collect();
            let eta: Vec<f64> = (0..4).map(|_| rng.random_range(0.2..1.0)).collect();
            let (_, ap, am) = dual_at(&mats, &eta, &y, &svr);
            let h = 1e-5;
            for k in 0..4 {
                let g = mkl_gradient(&ap, &am, &mats, &eta, k).unwrap();
                let (mut up, mut down) = (eta.clone(), eta.clone());
                up[k] += h;
                down[k] -= h;
                let fd = (dual_at(&mats, &up, &y, &svr).0 - dual_at(&mats, &down, &y, &svr).0)
                    / (2.0 * h);
                let err = (g - fd).abs();
                ensure!(
                    err <= 1e-3 * g.abs().max(fd.abs()) + 1e-8,
                    "n {n} seed {seed} kernel {k}: gradient {g} vs finite difference {fd}"
                );
                grad_err = grad_err.max(err / g.abs().max(fd.abs()).max(1e-12));
            }
        }
    }

    // Projection lands in M.
    for _ in 0..200 {
        let p = rng.random_range(1..9);
        let eta0: Vec<f64> = (0..p).map(|_| rng.random_range(0.0..1.0)).collect();
        let eta: Vec<f64> = (0..p).map(|_| rng.random_range(-3.0..3.0)).collect();
        let lambda = rng.random_range(0.1..2.0);
        let v = project_onto_m(&eta, &eta0, lambda).unwrap();
        ensure!(
            v.iter().all(|&x| x >= 0.0),
            "projection {v:?} has a negative entry"
        );
        let dist = v
            .iter()
            .zip(&eta0)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        ensure!(
            dist <= lambda * (1.0 + 1e-12),
            "projection at distance {dist} > {lambda}"
        );
    }

    // Backtracking keeps the objective trace non-increasing.
    let d = generate_synthetic(&SyntheticParams {
        n_users: 100,
        n_items: 20,
        ratings_per_user_mean: 8.0,
        seed: 4,
        ..SyntheticParams::default()
    })
    .unwrap();
    let bank = KernelBank::build(&d, &KernelConfig::default(), None).unwrap();
    let mut traces = 0;
    for item in 0..5 {
        let raters = d.ratings().item_ratings(item);
        if raters.len() < 5 {
            continue;
        }
        let users: Vec<usize> = raters.iter().map(|r| r.0).collect();
        let y: Vec<f64> = raters.iter().map(|r| r.1).collect();
        let (state, _) = fit_nlmkl(
            bank.kernels(),
            &users,
            &y,
            &SvrConfig::default(),
            &MklConfig {
                max_iters: 15,
                ..MklConfig::default()
            },
        )
        .unwrap();
        for w in state.trace.windows(2) {
            ensure!(
                w[1] <= w[0] + 1e-9,
                "item {item}: trace {:?} increases",
                state.trace
            );
        }
        traces += 1;
    }
    ensure!(traces > 0, "no item had enough raters");

    // Degree-2 combination against the explicit double sum.
    let owned: Vec<DMatrix<f64>> = (0..5).map(|_| random_psd(12, &mut rng)).collect();
    let mats: Vec<&DMatrix<f64>> = owned.iter().collect();
    let eta: Vec<f64> = (0..5).map(|_| rng.random_range(0.0..1.5)).collect();
    let combined = combine_matrices(&mats, &eta, 2).unwrap();
    let mut sum_err: f64 = 0.0;
    for i in 0..12 {
        for j in 0..12 {
            let mut s = 0.0;
            for a in 0..5 {
                for b in 0..5 {
                    s += eta[a] * eta[b] * owned[a][(i, j)] * owned[b][(i, j)];
                }
            }
            sum_err = sum_err.max((combined[(i, j)] - s).abs());
        }
    }
    ensure!(
        sum_err <= 1e-12,
        "degree-2 combination off the double sum by {sum_err:e}"
    );

    Ok(format!(
        "SVR vs reference {qp_err:.1e}, gradient rel. error {grad_err:.1e}, {traces} traces monotone, double sum {sum_err:.1e}"
    ))
}

struct Replication {
    combined: f64,
    best_single: (String, f64),
    ni: f64,
    mni: f64,
    mni_normalized: f64,
    cf_avg: f64,
    bin_1_5: f64,
    bin_11_20: f64,
}

fn replicate() -> Result<Replication, String> {
    let d = generate_synthetic(&SyntheticParams::default()).unwrap();
    let mut methods = vec![Method::Ni, Method::Mni, Method::Cf(CfSimilarity::Average)];
    methods.extend(KernelLabel::THEORY.map(Method::Svr));
    methods.push(Method::Combined);
    let ev = run_cross_validation(&d, &methods, 5, 5, 7, &EvalConfig::default())
        .map_err(|e| e.to_string())?;
    let r = &ev.report;
    let rmse = |name: &str| r.methods.iter().find(|m| m.name == name).unwrap().rmse_mean;
    let best_single = r
        .methods
        .iter()
        .filter(|m| m.name.starts_with("K_"))
        .map(|m| (m.name.clone(), m.rmse_mean))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap();
    let mni = r.methods.iter().find(|m| m.name == "MNI").unwrap();
    let col = r.bins.methods.iter().position(|m| m == "COMBINED").unwrap();
    let bin = |label: &str| {
        r.bins
            .rows
            .iter()
            .find(|row| row.bin.label() == label)
            .and_then(|row| row.rmse[col])
            .unwrap_or(f64::NAN)
    };
    Ok(Replication {
        combined: rmse("COMBINED"),
        best_single,
        ni: rmse("NI"),
        mni: mni.rmse_mean,
        mni_normalized: mni.variant.as_ref().map_or(f64::NAN, |v| v.rmse_mean),
        cf_avg: rmse("CF-S_AVG"),
        bin_1_5: bin("1-5"),
        bin_11_20: bin("11-20"),
    })
}

fn criterion_5(r: &Replication) -> Check {
    let (name, best) = &r.best_single;
    ensure!(
        r.combined <= best + 0.02,
        "COMBINED {:.4} > {name} {best:.4} + 0.02",
        r.combined
    );
    ensure!(
        r.combined < r.ni,
        "COMBINED {:.4} not below NI {:.4}",
        r.combined,
        r.ni
    );
    ensure!(
        r.combined < r.mni,
        "COMBINED {:.4} not below MNI {:.4}",
        r.combined,
        r.mni
    );
    ensure!(
        r.combined < r.cf_avg,
        "COMBINED {:.4} not below CF-S_AVG {:.4}",
        r.combined,
        r.cf_avg
    );
    Ok(format!(
        "COMBINED {:.4}, best single {name} {best:.4}, NI {:.4}, MNI {:.4}, CF-S_AVG {:.4}",
        r.combined, r.ni, r.mni, r.cf_avg
    ))
}

fn criterion_6(r: &Replication) -> Check {
    let gain = (r.bin_1_5 - r.bin_11_20) / r.bin_1_5;
    ensure!(
        gain >= 0.02,
        "COMBINED 1-5 bin {:.4}, 11-20 bin {:.4}: improvement {:.1}%",
        r.bin_1_5,
        r.bin_11_20,
        100.0 * gain
    );
    Ok(format!(
        "COMBINED 1-5 bin {:.4} -> 11-20 bin {:.4} ({:.1}% lower)",
        r.bin_1_5,
        r.bin_11_20,
        100.0 * gain
    ))
}

fn criterion_7(r: &Replication) -> Check {
    ensure!(
        r.mni_normalized <= r.ni,
        "normalized MNI {:.4} above NI {:.4}",
        r.mni_normalized,
        r.ni
    );
    Ok(format!(
        "normalized MNI {:.4} <= NI {:.4}",
        r.mni_normalized, r.ni
    ))
}

fn criterion_8() -> Check {
    let d = generate_synthetic(&SyntheticParams {
        n_users: 80,
        n_items: 15,
        seed: 12,
        ..SyntheticParams::default()
    })
    .unwrap();
    let config = EvalConfig {
        tuning: TuningConfig {
            alpha_grid: vec![0.5, 0.85],
            sigma_scales: vec![0.5, 1.0],
            c_grid: vec![1.0, 3.0],
            epsilon_grid: vec![0.3],
            mni_damping: vec![0.3, 0.7],
            ..TuningConfig::default()
        },
        mkl: MklConfig {
            max_iters: 5,
            ..MklConfig::default()
        },
        ..EvalConfig::default()
    };
    let run = || run_cross_validation(&d, &Method::all(), 3, 2, 99, &config).unwrap();
    let a = report_without_timing(&run().report).unwrap();
    let b = report_without_timing(&run().report).unwrap();
    ensure!(a == b, "reports of identical runs differ");
    Ok(format!(
        "{} methods, reports identical modulo timing",
        Method::all().len()
    ))
}

/// Runs one check; `spent` is time already used on its behalf.
fn report(id: usize, limit: Duration, spent: Duration, f: impl FnOnce() -> Check) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let elapsed = start.elapsed() + spent;
    let outcome = outcome.and_then(|msg| {
        if elapsed > limit {
            Err(format!(
                "{msg}; took {:.1}s, limit {:.0}s",
                elapsed.as_secs_f64(),
                limit.as_secs_f64()
            ))
        } else {
            Ok(msg)
        }
    });
    match outcome {
        Ok(msg) => {
            println!("PASS criterion {id} ({:.2}s): {msg}", elapsed.as_secs_f64());
            true
        }
        Err(msg) => {
            println!("FAIL criterion {id} ({:.2}s): {msg}", elapsed.as_secs_f64());
            false
        }
    }
}

fn main() {
    let secs = Duration::from_secs;
    let none = Duration::ZERO;
    let mut ok = true;
    ok &= report(1, secs(1), none, criterion_1);
    ok &= report(2, secs(60), none, criterion_2);
    ok &= report(3, secs(10), none, criterion_3);
    ok &= report(4, secs(60), none, criterion_4);

    let start = Instant::now();
    let run = catch_unwind(replicate).unwrap_or_else(|_| Err("replication run panicked".into()));
    let run_time = start.elapsed();
    let shared = |check: fn(&Replication) -> Check| {
        let run = &run;
        move || -> Check {
            let r = run.as_ref().map_err(Clone::clone)?;
            check(r)
        }
    };
    // Criteria 5 to 7 share one cross-validation run.
    ok &= report(5, secs(600), run_time, shared(criterion_5));
    ok &= report(6, secs(600), run_time, shared(criterion_6));
    ok &= report(7, secs(600), run_time, shared(criterion_7));
    ok &= report(8, secs(600), none, criterion_8);

    if !ok {
        std::process::exit(1);
    }
}

//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. Runs as a plain binary (`harness = false`) so the lines
//! always reach the terminal.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use vesdn::encoders::{gelu, l2_normalize, Parameters};
use vesdn::evaluation::{mi_accuracy_analysis, pearson, window_means};
use vesdn::feature_io::{generate_synthetic, FeatureBatch, FeaturePack, SynthConfig};
use vesdn::gradcheck::{central_diff, rel_error};
use vesdn::mi::{
    club_upper_bound, club_with_grad, gaussian_mi_analytic, gaussian_nll_with_grad, info_nce, info_nce_with_grad,
    sup_con, sup_con_with_grad, VariationalNet,
};
use vesdn::optim::{adamw_update, AdamW};
use vesdn::prototypes::{intra_class_loss, intra_class_loss_with_grad, Deviation, PrototypeBank};
use vesdn::training::{fit, objective, History, Mode, TrainConfig, TrainState};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

fn flat(p: &dyn Parameters) -> Vec<f64> {
    p.tensors().iter().flat_map(|t| t.data.to_vec()).collect()
}

fn set_flat(p: &mut dyn Parameters, v: &[f64]) {
    let mut off = 0;
    for t in p.tensors_mut() {
        let n = t.len();
        t.copy_from_slice(&v[off..off + n]);
        off += n;
    }
}

fn fd_matrix(f: impl Fn(&Array2<f64>) -> f64, x: &Array2<f64>) -> Vec<f64> {
    let shape = x.raw_dim();
    central_diff(
        |v| f(&Array2::from_shape_vec(shape, v.to_vec()).unwrap()),
        x.as_slice().unwrap(),
        1e-6,
    )
}

fn to_vec(a: &Array2<f64>) -> Vec<f64> {
    a.iter().copied().collect()
}

// ---------------------------------------------------------------- A1

fn a1() -> Outcome {
    let start = Instant::now();
    let n = 100_000;
    let mut details = Vec::new();
    let mut pass = true;
    for (k, &rho) in [0.0f64, 0.5, 0.8].iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + k as u64);
        let x = gaussian(n, 1, &mut rng);
        let e = gaussian(n, 1, &mut rng);
        let y = &x * rho + &e * (1.0 - rho * rho).sqrt();

        let mut q = VariationalNet::init(1, 16, 1, &mut rng).unwrap();
        let mut opt = AdamW::new(&q, 5e-3, 0.0);
        let mut order: Vec<usize> = (0..n).collect();
        for _ in 0..20 {
            order.shuffle(&mut rng);
            for chunk in order.chunks(1000) {
                let xb = x.select(ndarray::Axis(0), chunk);
                let yb = y.select(ndarray::Axis(0), chunk);
                let g = gaussian_nll_with_grad(&q, yb.view(), xb.view()).unwrap();
                opt.apply(&mut q, &g.grad_q);
            }
        }
        let club = club_upper_bound(&q, y.view(), x.view()).unwrap();
        let analytic = gaussian_mi_analytic(rho, 1).unwrap();
        let within = (club - analytic).abs() <= 0.1;
        let above = club >= analytic - 0.1;
        pass &= within && above;
        details.push(format!("rho={rho}: club={club:.4} analytic={analytic:.4}"));
    }
    let secs = start.elapsed().as_secs_f64();
    pass &= secs < 120.0;
    outcome(pass, format!("{} ({secs:.1}s)", details.join(", ")))
}

// ---------------------------------------------------------------- A2

fn a2() -> Outcome {
    let n = 16;
    let same = Array2::from_shape_fn((n, 4), |(_, j)| if j == 0 { 1.0 } else { 0.0 });
    let uniform = info_nce(same.view(), same.view(), 0.07).unwrap();
    let uniform_ok = (uniform - (n as f64).ln()).abs() <= 1e-6;

    let one = l2_normalize(Array2::from_shape_vec((1, 3), vec![0.3, -0.2, 0.9]).unwrap().view());
    let single = info_nce(one.view(), one.view(), 0.07).unwrap();
    let single_ok = single.abs() <= 1e-12;

    let n = 256;
    let vals: Vec<f64> = (0..20u64)
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = l2_normalize(gaussian(n, 8, &mut rng).view());
            let b = l2_normalize(gaussian(n, 8, &mut rng).view());
            (n as f64).ln() - info_nce(a.view(), b.view(), 0.07).unwrap()
        })
        .collect();
    let mean = vals.iter().sum::<f64>() / 20.0;
    let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 19.0).sqrt();
    let bound = 0.0 + 3.0 * sd / 20f64.sqrt();
    let indep_ok = mean <= bound;
    outcome(
        uniform_ok && single_ok && indep_ok,
        format!(
            "uniform L={uniform:.9} (log n={:.9}), n=1 L={single}, rho=0 mean(log n - L)={mean:.4} <= {bound:.4}",
            16f64.ln()
        ),
    )
}

// ---------------------------------------------------------------- A3

fn a3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut errs: BTreeMap<&str, f64> = BTreeMap::new();
    let mut record = |name: &'static str, e: f64| {
        let slot = errs.entry(name).or_insert(0.0);
        *slot = slot.max(e);
    };

    // CLUB and the variational likelihood
    let q = VariationalNet::init(3, 5, 4, &mut rng).unwrap();
    let zs = gaussian(7, 4, &mut rng);
    let zd = gaussian(7, 3, &mut rng);
    type QLoss = fn(&VariationalNet, ndarray::ArrayView2<f64>, ndarray::ArrayView2<f64>) -> vesdn::Result<vesdn::mi::QLossGrad>;
    for (name, f) in [("club", club_with_grad as QLoss), ("loglikeli", gaussian_nll_with_grad as QLoss)] {
        let g = f(&q, zs.view(), zd.view()).unwrap();
        let fd_t = fd_matrix(|t| f(&q, t.view(), zd.view()).unwrap().value, &zs);
        record(name, rel_error(&to_vec(&g.grad_target), &fd_t));
        let fd_c = fd_matrix(|c| f(&q, zs.view(), c.view()).unwrap().value, &zd);
        record(name, rel_error(&to_vec(&g.grad_cond), &fd_c));
        let fd_q = central_diff(
            |v| {
                let mut qq = q.clone();
                set_flat(&mut qq, v);
                f(&qq, zs.view(), zd.view()).unwrap().value
            },
            &flat(&q),
            1e-6,
        );
        record(name, rel_error(&flat(&g.grad_q), &fd_q));
    }

    // contrastive losses, including the temperature
    let a = l2_normalize(gaussian(6, 5, &mut rng).view());
    let b = l2_normalize(gaussian(6, 5, &mut rng).view());
    let labels = [0, 1, 0, 2, 1, 3];
    let tau = 0.3;
    let g = info_nce_with_grad(a.view(), b.view(), tau).unwrap();
    record("info_nce", rel_error(&to_vec(&g.grad_a), &fd_matrix(|x| info_nce(x.view(), b.view(), tau).unwrap(), &a)));
    record("info_nce", rel_error(&to_vec(&g.grad_b), &fd_matrix(|x| info_nce(a.view(), x.view(), tau).unwrap(), &b)));
    let fd_t = central_diff(|v| info_nce(a.view(), b.view(), 1.0 / v[0]).unwrap(), &[1.0 / tau], 1e-6);
    record("info_nce", rel_error(&[g.grad_inv_tau], &fd_t));
    let g = sup_con_with_grad(a.view(), b.view(), &labels, tau).unwrap();
    record(
        "sup_con",
        rel_error(&to_vec(&g.grad_a), &fd_matrix(|x| sup_con(x.view(), b.view(), &labels, tau).unwrap(), &a)),
    );
    record(
        "sup_con",
        rel_error(&to_vec(&g.grad_b), &fd_matrix(|x| sup_con(a.view(), x.view(), &labels, tau).unwrap(), &b)),
    );
    let fd_t = central_diff(|v| sup_con(a.view(), b.view(), &labels, 1.0 / v[0]).unwrap(), &[1.0 / tau], 1e-6);
    record("sup_con", rel_error(&[g.grad_inv_tau], &fd_t));

    // intra-class consistency, away from equal-distance points
    let mut bank = PrototypeBank::init(4, 5, 0.5, 1).unwrap();
    bank.centers *= 0.5;
    let zv = gaussian(6, 5, &mut rng);
    for dev in [Deviation::Absolute, Deviation::Squared] {
        let (_, g) = intra_class_loss_with_grad(zv.view(), &labels, &bank, dev).unwrap();
        let fd = fd_matrix(|x| intra_class_loss_with_grad(x.view(), &labels, &bank, dev).unwrap().0, &zv);
        record("intra", rel_error(&to_vec(&g), &fd));
    }

    // reconstruction alone on top of the contrastive term, then the total
    let batch = FeatureBatch {
        h_v: gaussian(6, 5, &mut rng),
        x_b: gaussian(6, 4, &mut rng),
        y: labels.to_vec(),
    };
    let base = TrainConfig {
        mode: Mode::VeSdn,
        d_joint: 4,
        hidden: Some(5),
        q_hidden: Some(3),
        backbone_dim: Some(6),
        tau_init: 0.5,
        ..TrainConfig::default()
    };
    let recon_only = TrainConfig { lambda1: 0.0, lambda3: 0.0, intra: false, ..base.clone() };
    let cases: [(&'static str, TrainConfig); 3] = [
        ("recon", recon_only),
        ("total", base.clone()),
        ("total_supcon", TrainConfig { supcon: true, ..base.clone() }),
    ];
    for (name, cfg) in cases {
        let state = TrainState::new(&cfg, 5, 4, 4).unwrap();
        let (_, grads) = objective(&state.net, &cfg, &batch, &state.q_v, &state.q_b, &state.bank).unwrap();
        let fd = central_diff(
            |v| {
                let mut net = state.net.clone();
                set_flat(&mut net, v);
                objective(&net, &cfg, &batch, &state.q_v, &state.q_b, &state.bank).unwrap().0.total
            },
            &flat(&state.net),
            1e-6,
        );
        record(name, rel_error(&flat(&grads), &fd));
    }

    let worst = errs.values().cloned().fold(0.0, f64::max);
    let detail: Vec<String> = errs.iter().map(|(k, v)| format!("{k}={v:.1e}")).collect();
    outcome(worst < 1e-4, format!("max rel err {worst:.2e} [{}]", detail.join(" ")))
}

// ---------------------------------------------------------------- A4-A7

fn acceptance_config(seed: u64) -> TrainConfig {
    TrainConfig {
        mode: Mode::VeSdn,
        d_joint: 32,
        hidden: Some(64),
        batch_size: 128,
        epochs: 30,
        seed,
        ..TrainConfig::default()
    }
}

fn a4_pack(seed: u64, noise_sigma: f64) -> FeaturePack {
    generate_synthetic(&SynthConfig {
        k_seen: 50,
        k_unseen: 10,
        n_per_class: 40,
        d_sem: 16,
        noise_sigma,
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

struct Run {
    history: History,
    secs: f64,
}

fn train(cfg: &TrainConfig, pack: &FeaturePack) -> Run {
    let start = Instant::now();
    let (_, history) = fit(cfg, pack, None).unwrap();
    Run { history, secs: start.elapsed().as_secs_f64() }
}

fn a4(runs: &[Run]) -> Outcome {
    let mut ok = 0;
    let mut parts = Vec::new();
    for r in runs {
        let last = r.history.epochs.last().unwrap();
        if last.top1 >= 0.30 && last.top5 >= 0.70 && r.secs < 300.0 {
            ok += 1;
        }
        parts.push(format!("{:.3}/{:.3}", last.top1, last.top5));
    }
    let secs: f64 = runs.iter().map(|r| r.secs).sum();
    outcome(
        ok >= 4,
        format!("{ok}/5 seeds with top1>=0.30 & top5>=0.70 [top1/top5: {}] ({secs:.1}s total)", parts.join(" ")),
    )
}

fn a5(with_intra: &[Run], without: &[Run]) -> Outcome {
    let mut ok = 0;
    let mut parts = Vec::new();
    for (a, b) in with_intra.iter().zip(without) {
        let (sa, sb) = (a.history.epochs.last().unwrap().gap_std, b.history.epochs.last().unwrap().gap_std);
        if sa < sb {
            ok += 1;
        }
        parts.push(format!("{sa:.4}<{sb:.4}"));
    }
    outcome(ok >= 4, format!("{ok}/5 seeds with lower gap std at lambda3=0.5 [{}]", parts.join(" ")))
}

fn a6(runs: &[Run]) -> Outcome {
    let mut ok = 0;
    let mut parts = Vec::new();
    for r in runs {
        let e = &r.history.epochs;
        let check = |f: fn(&vesdn::training::EpochSummary) -> f64| {
            let early = e.iter().take(3).map(f).fold(f64::NEG_INFINITY, f64::max);
            let last = f(e.last().unwrap());
            (last < early, last, early)
        };
        let (v_ok, v_last, v_max) = check(|s| s.l_mi_v);
        let (b_ok, b_last, b_max) = check(|s| s.l_mi_b);
        if v_ok && b_ok {
            ok += 1;
        }
        parts.push(format!("v {v_last:.3}<{v_max:.3} b {b_last:.3}<{b_max:.3}"));
    }
    outcome(ok >= 4, format!("{ok}/5 seeds with final CLUB below early max [{}]", parts.join("; ")))
}

fn a7() -> Outcome {
    let noises = [0.25, 0.5, 1.0, 1.5, 2.0, 3.0];
    let runs: Vec<Run> = noises.iter().map(|&s| train(&acceptance_config(0), &a4_pack(0, s))).collect();
    let mi: Vec<f64> = runs.iter().map(|r| window_means(&r.history, 10).unwrap().0).collect();
    let top1: Vec<f64> = runs.iter().map(|r| r.history.epochs.last().unwrap().top1).collect();
    let inter = pearson(&mi, &top1).unwrap();
    let intra = mi_accuracy_analysis(&runs[0].history).unwrap().r_top1;
    outcome(
        inter > 0.5 && intra > 0.7,
        format!("inter-run r={inter:.3} (>0.5), intra-run r at noise {}={intra:.3} (>0.7)", noises[0]),
    )
}

// ---------------------------------------------------------------- A8

fn a8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let q = VariationalNet::constant(3, 4, &[0.2, -0.4], &[0.3, -1.0]);
    let club = club_upper_bound(&q, gaussian(50, 2, &mut rng).view(), gaussian(50, 3, &mut rng).view()).unwrap();

    let mut bank = PrototypeBank::init(1, 2, 0.5, 0).unwrap();
    bank.centers.fill(0.0);
    let z = Array2::from_shape_vec((2, 2), vec![1.0, 0.0, 3.0, 0.0]).unwrap();
    let intra = intra_class_loss(z.view(), &[0, 0], &bank).unwrap();

    let mut ema = PrototypeBank::init(1, 2, 0.5, 0).unwrap();
    ema.centers = Array2::from_shape_vec((1, 2), vec![1.0, 0.0]).unwrap();
    ema.ema_update(&BTreeMap::from([(0, ndarray::arr1(&[0.0, 1.0]))])).unwrap();
    let ema_err = (ema.centers[[0, 0]] - 0.5).abs().max((ema.centers[[0, 1]] - 0.5).abs());

    let r = pearson(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
    let g1 = gelu(1.0);

    let mut p = [0.0];
    adamw_update(&mut p, &[1.0], &mut [0.0], &mut [0.0], 0.1, 0.0, 1);

    let checks = [
        ("club_const", club.abs()),
        ("intra{1,3}", (intra - 1.0).abs()),
        ("ema", ema_err),
        ("pearson", (r - 0.8).abs()),
        ("gelu(1)", (g1 - 0.841345).abs()),
        ("adamw", (p[0] + 0.1).abs()),
    ];
    let worst = checks.iter().map(|c| c.1).fold(0.0, f64::max);
    let detail: Vec<String> = checks.iter().map(|(k, e)| format!("{k}={e:.1e}")).collect();
    outcome(worst <= 1e-5, format!("max abs err {worst:.1e} [{}]", detail.join(" ")))
}

// ---------------------------------------------------------------- A9

fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect()
}

fn a9() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let pack = a4_pack(3, 0.5);
    let cfg = TrainConfig { epochs: 3, ..acceptance_config(3) };
    let (state, h1) = fit(&cfg, &pack, None).unwrap();
    let (_, h2) = fit(&cfg, &pack, None).unwrap();
    let history_ok = h1.to_csv().as_bytes() == h2.to_csv().as_bytes();

    let (p1, p2) = (tmp.path().join("pack1"), tmp.path().join("pack2"));
    pack.save(&p1).unwrap();
    FeaturePack::load(&p1).unwrap().save(&p2).unwrap();
    let pack_ok = dir_bytes(&p1) == dir_bytes(&p2);

    let (c1, c2) = (tmp.path().join("ckpt1"), tmp.path().join("ckpt2"));
    vesdn::checkpoint::save(&state, &c1).unwrap();
    vesdn::checkpoint::save(&vesdn::checkpoint::load(&c1).unwrap(), &c2).unwrap();
    let ckpt_ok = dir_bytes(&c1) == dir_bytes(&c2);

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let za = l2_normalize(gaussian(32, 8, &mut rng).view());
    let zb = l2_normalize(gaussian(32, 8, &mut rng).view());
    let distinct: Vec<usize> = (0..32).rev().collect();
    let diff = (sup_con(za.view(), zb.view(), &distinct, 0.07).unwrap() - info_nce(za.view(), zb.view(), 0.07).unwrap()).abs();
    let supcon_ok = diff <= 1e-6;
    outcome(
        history_ok && pack_ok && ckpt_ok && supcon_ok,
        format!("history csv identical={history_ok}, pack round trip={pack_ok}, checkpoint round trip={ckpt_ok}, |supcon-infonce|={diff:.1e}"),
    )
}

fn report(id: &str, title: &str, o: &Outcome) -> bool {
    println!("{id} {} {title}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    o.pass
}

fn main() {
    let mut all = true;
    all &= report("A1", "CLUB oracle", &a1());
    all &= report("A2", "InfoNCE anchors", &a2());
    all &= report("A3", "gradient suite", &a3());

    let packs: Vec<FeaturePack> = (0..5).map(|s| a4_pack(s, 0.5)).collect();
    let with_intra: Vec<Run> = packs.iter().zip(0u64..).map(|(p, s)| train(&acceptance_config(s), p)).collect();
    all &= report("A4", "synthetic zero-shot", &a4(&with_intra));
    let without: Vec<Run> = packs
        .iter()
        .zip(0u64..)
        .map(|(p, s)| train(&TrainConfig { lambda3: 0.0, ..acceptance_config(s) }, p))
        .collect();
    all &= report("A5", "intra-class consistency effect", &a5(&with_intra, &without));
    all &= report("A6", "decoupling trend", &a6(&with_intra));
    all &= report("A7", "MI/accuracy correlation", &a7());
    all &= report("A8", "exactness micro-suite", &a8());
    all &= report("A9", "determinism and formats", &a9());
    if !all {
        std::process::exit(1);
    }
}

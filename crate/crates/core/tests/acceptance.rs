//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary so every criterion is reported even when an earlier
//! one fails. Set `RDLCQR_ACCEPTANCE_STRICT=1` to exit nonzero on any FAIL and
//! `RDLCQR_LEE_CSV=<path>` (columns `x`, `y`, cutoff 0) to run criterion 9.

mod common;

use std::time::Instant;

use rdlcqr::are::{are_table, grid_from_law};
use rdlcqr::bandwidth::{
    adj_mse_from_constants, equal_adj_mse_from_constants, rot_from_constants, select_rule_of_thumb,
    BandwidthMethod,
};
use rdlcqr::fuzzy::analyze_fuzzy;
use rdlcqr::io::{self, BandwidthChoice, ColumnMapping, Command, JobConfig, OutputFormat};
use rdlcqr::kernels::{one_sided_moments, KernelFamily, KernelSpec, Side};
use rdlcqr::laws::ErrorLaw;
use rdlcqr::lcqr::{solve_composite, SolverOptions};
use rdlcqr::montecarlo::{
    draw_sample, replication_rng, run_study, BandwidthRule, DgpSpec, EstimatorKind, FuzzyOverlay,
    McSummary, MeanModel, StudyConfig,
};
use rdlcqr::quadrature::integrate;
use rdlcqr::sandwich::{constants, SandwichMode};
use rdlcqr::sharp::{analyze_sharp, sharp_inference, Bandwidths, InferenceConfig};

const ARE_REFERENCE: [[f64; 5]; 5] = [
    [0.6968, 0.9290, 0.9569, 0.9728, 0.9819],
    [1.7411, 1.3315, 1.2920, 1.2616, 1.2303],
    [1.4718, 1.6401, 1.6144, 1.5703, 1.4854],
    [0.8639, 1.1271, 1.1511, 1.1579, 1.1327],
    [2.6960, 3.4578, 3.4986, 3.4590, 2.2632],
];

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn study(
    spec: &DgpSpec,
    estimators: &[EstimatorKind],
    reps: usize,
    mode: SandwichMode,
) -> Vec<McSummary> {
    let cfg = StudyConfig {
        estimators: estimators.to_vec(),
        bandwidth: BandwidthRule::Selected(BandwidthMethod::AdjMseEqual),
        inference: InferenceConfig {
            mode,
            ..Default::default()
        },
        reps,
        seed: 42,
        ..Default::default()
    };
    run_study(spec, &cfg).expect("study runs")
}

fn row<'a>(rows: &'a [McSummary], name: &str) -> &'a McSummary {
    rows.iter()
        .find(|r| r.estimator == name)
        .expect("estimator row")
}

fn slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

fn criterion1() -> Outcome {
    let start = Instant::now();
    let laws: Vec<ErrorLaw> = (1..=5).map(|i| ErrorLaw::numbered(i).unwrap()).collect();
    let table = are_table(&laws, &[1, 5, 9, 19, 99], &KernelSpec::triangular()).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let mut worst = 0.0f64;
    for (i, r) in table.values.iter().enumerate() {
        for (j, v) in r.iter().enumerate() {
            worst = worst.max((v - ARE_REFERENCE[i][j]).abs());
        }
    }
    verdict(
        worst <= 0.002 && secs < 10.0,
        format!("max |ARE - reference| = {worst:.5} (tol 0.002), runtime {secs:.2}s (< 10s)"),
    )
}

fn criterion2() -> Outcome {
    let tri = KernelSpec::triangular();
    let mo = one_sided_moments(&tri, Side::Above, 7).unwrap();

    let mut worst_a = 0.0f64;
    for i in 1..=5 {
        let law = ErrorLaw::numbered(i).unwrap();
        let grid = grid_from_law(&law, 1).unwrap();
        let k = constants(&mo, &grid).unwrap();
        let f = grid.f_at_c[0];
        let product = k.b * 0.25 / (f * f);
        worst_a = worst_a.max((k.b_y - product).abs() / product);
    }

    let m = |j: i32, sq: bool| {
        integrate(
            |u| {
                let k = 1.0 - u;
                u.powi(j) * if sq { k * k } else { k }
            },
            0.0,
            1.0,
            1e-14,
        )
    };
    let (m0, m1, m2, m3) = (m(0, false), m(1, false), m(2, false), m(3, false));
    let det = m0 * m2 - m1 * m1;
    let a_oracle = (m2 * m2 - m1 * m3) / det;
    let b_oracle = integrate(
        |u| {
            let k = 1.0 - u;
            (m2 - m1 * u).powi(2) * k * k
        },
        0.0,
        1.0,
        1e-14,
    ) / (det * det);
    let err_b = (mo.a() - a_oracle)
        .abs()
        .max((mo.b() - b_oracle).abs())
        .max((mo.a() + 0.1).abs())
        .max((mo.b() - 4.8).abs());

    let mut worst_c = 0.0f64;
    for fam in [
        KernelFamily::Triangular,
        KernelFamily::Epanechnikov,
        KernelFamily::Uniform,
        KernelFamily::Gaussian,
    ] {
        let spec = KernelSpec::new(fam);
        let closed = one_sided_moments(&spec, Side::Above, 7).unwrap();
        let bound = spec.effective_bound();
        for j in 0..=7 {
            let mu = integrate(|u| u.powi(j) * spec.eval(u), 0.0, bound, 1e-14);
            let nu = integrate(|u| u.powi(j) * spec.eval(u).powi(2), 0.0, bound, 1e-14);
            worst_c = worst_c
                .max((closed.mu[j as usize] - mu).abs())
                .max((closed.nu[j as usize] - nu).abs());
        }
    }
    verdict(
        worst_a < 1e-8 && err_b < 1e-8 && worst_c < 1e-10,
        format!(
            "(a) q=1 rel err {worst_a:.1e} (tol 1e-8); (b) a,b err {err_b:.1e} (tol 1e-8); (c) moment err {worst_c:.1e} (tol 1e-10)"
        ),
    )
}

fn criterion3() -> Outcome {
    let opts = SolverOptions {
        record_trace: true,
        ..Default::default()
    };
    let mut worst = 0.0f64;
    let mut monotone = true;
    for seed in 0..100 {
        let (y, w, design, m, taus) = common::random_instance(seed);
        let sol = solve_composite(&y, &w, &design, m, &taus, &opts).unwrap();
        let exact = common::lp_minimum(&y, &w, &design, m, &taus);
        worst = worst.max((sol.objective - exact).abs() / exact.abs().max(1e-12));
        monotone &= sol
            .trace
            .windows(2)
            .all(|p| p[1] <= p[0] + 1e-12 * p[0].abs());
    }
    verdict(
        worst < 1e-8 && monotone,
        format!("100 instances: max rel gap {worst:.1e} (tol 1e-8), traces monotone: {monotone}"),
    )
}

fn criterion4() -> Outcome {
    let start = Instant::now();
    let spec = DgpSpec::new(MeanModel::Lee, 1, false, 500);
    let asy = study(
        &spec,
        &[EstimatorKind::Cqr, EstimatorKind::CqrBc],
        1000,
        SandwichMode::Asymptotic,
    );
    let fixed = study(&spec, &[EstimatorKind::CqrBc], 1000, SandwichMode::FixedN);
    let secs = start.elapsed().as_secs_f64();
    let mean = row(&asy, "cqr").mean_point.unwrap();
    let se = row(&asy, "cqr").mean_estimated_se.unwrap();
    let cov = row(&asy, "cqr-bc").coverage_adjusted.unwrap();
    let cov_f = row(&fixed, "cqr-bc").coverage_adjusted.unwrap();
    verdict(
        (cov - 0.973).abs() <= 0.02
            && (mean - 0.071).abs() <= 0.015
            && (se - 0.188).abs() <= 0.02
            && (cov_f - 0.980).abs() <= 0.02
            && secs < 600.0,
        format!(
            "bc coverage {cov:.3} (0.973+-0.02), mean {mean:.4} (0.071+-0.015), mean s.e. {se:.4} (0.188+-0.02), fixed-n coverage {cov_f:.3} (0.980+-0.02), {secs:.1}s"
        ),
    )
}

fn criterion5() -> Outcome {
    let lm = study(
        &DgpSpec::new(MeanModel::Lm, 1, true, 500),
        &[EstimatorKind::Cqr, EstimatorKind::CqrBc],
        1000,
        SandwichMode::Asymptotic,
    );
    let plain = row(&lm, "cqr").coverage_plain.unwrap();
    let bc = row(&lm, "cqr-bc").coverage_adjusted.unwrap();
    let lee = study(
        &DgpSpec::new(MeanModel::Lee, 5, true, 500),
        &[EstimatorKind::Cqr, EstimatorKind::Llr],
        1000,
        SandwichMode::Asymptotic,
    );
    let se_c = row(&lee, "cqr").mean_estimated_se.unwrap();
    let se_l = row(&lee, "llr").mean_estimated_se.unwrap();
    let ratio = se_c / se_l;
    verdict(
        bc - plain > 0.2 && ratio < 0.8,
        format!(
            "LM DGP1 hetero coverage {plain:.3} vs bc {bc:.3} (gap {:.3} > 0.2); Lee DGP5 hetero s.e. ratio {ratio:.3} (< 0.8)",
            bc - plain
        ),
    )
}

fn criterion6() -> Outcome {
    let cfg = StudyConfig {
        estimators: vec![EstimatorKind::Kink],
        kink_bandwidth: 0.3,
        reps: 500,
        seed: 42,
        ..Default::default()
    };
    let rows = run_study(&DgpSpec::new(MeanModel::Lm, 1, false, 500), &cfg).unwrap();
    let r = row(&rows, "kink");
    let mean = r.mean_point.unwrap();
    let mc_se = r.mc_sd.unwrap() / (r.replications as f64).sqrt();
    verdict(
        (mean - 16.19).abs() <= 0.6 && (mean - 15.91).abs() <= 0.5,
        format!(
            "kink mean {mean:.3} (16.19+-0.6 and 15.91+-0.5), Monte Carlo s.e. of the mean {mc_se:.3}"
        ),
    )
}

fn criterion7() -> Outcome {
    let ns: Vec<f64> = (0..8).map(|k| 250.0 * 2f64.powi(k)).collect();
    let logn: Vec<f64> = ns.iter().map(|n| n.ln()).collect();
    let adj: Vec<f64> = ns
        .iter()
        .map(|&n| adj_mse_from_constants(-0.2, 7.09, n).ln())
        .collect();
    let s_adj = slope(&logn, &adj);
    let rot: Vec<f64> = ns
        .iter()
        .map(|&n| rot_from_constants(1.9, 0.25, 1.0, 36.0 * n).ln())
        .collect();
    let s_rot = slope(&logn, &rot);

    let tri = KernelSpec::triangular();
    let mut data_x = Vec::new();
    let mut data_y = Vec::new();
    for k in 0..6 {
        let n = 4000usize << k;
        let mut hs = 0.0;
        let mut ns_side = 0.0;
        for rep in 0..4 {
            let s = draw_sample(
                &DgpSpec::new(MeanModel::Lee, 1, false, n),
                &mut replication_rng(7, (k * 4 + rep) as u64),
            )
            .unwrap();
            let d = s.side(Side::Below);
            let (h, _) = select_rule_of_thumb(&d.x, &d.y, Side::Below, 7, &tri).unwrap();
            hs += h.ln() / 4.0;
            ns_side += (d.x.len() as f64).ln() / 4.0;
        }
        data_x.push(ns_side);
        data_y.push(hs);
    }
    let s_rot_data = slope(&data_x, &data_y);

    let h128 = equal_adj_mse_from_constants(1.0, 0.0, 1.0, 1.0, 128.0);
    let exact = (1.0f64 / 3.0).powf(1.0 / 7.0) / 2.0;
    let err = (h128 - exact).abs();
    verdict(
        (s_adj + 1.0 / 7.0).abs() <= 0.01
            && (s_rot + 0.2).abs() <= 0.01
            && (s_rot_data + 0.2).abs() <= 0.01
            && err <= 1e-12,
        format!(
            "adj-MSE slope {s_adj:.4} (-1/7+-0.01), ROT slope {s_rot:.4} frozen / {s_rot_data:.4} estimated (-0.2+-0.01), n=128 example err {err:.1e}"
        ),
    )
}

fn criterion8() -> Outcome {
    let base = draw_sample(
        &DgpSpec::new(MeanModel::Lee, 1, false, 600),
        &mut replication_rng(3, 0),
    )
    .unwrap();
    let t = base
        .x
        .iter()
        .map(|&x| if x >= 0.0 { 1.0 } else { 0.0 })
        .collect();
    let s = base.with_treatment(t).unwrap();
    let bw = Bandwidths::equal(0.4);
    let cfg = InferenceConfig::default();
    let comp = analyze_fuzzy(&s, &bw, &cfg).unwrap();
    let sharp = analyze_sharp(&s, &bw, &cfg).unwrap();
    let d_tau = (comp.tau_hat().unwrap() - sharp.point()).abs();
    let d_var = (comp.var_adjusted(0.0) - sharp.var_adjusted()).abs();

    let mut spec = DgpSpec::new(MeanModel::Lee, 1, false, 500);
    spec.fuzzy = Some(FuzzyOverlay::default());
    let rows = study(
        &spec,
        &[EstimatorKind::FuzzyTest],
        1000,
        SandwichMode::Asymptotic,
    );
    let r = row(&rows, "fuzzy-test");
    let size = 1.0 - r.coverage_adjusted.unwrap();
    verdict(
        d_tau < 1e-8 && d_var < 1e-10 && (0.02..=0.09).contains(&size),
        format!(
            "|tau_fuzzy - tau_sharp| {d_tau:.1e} (< 1e-8), variance gap {d_var:.1e} (< 1e-10), null-restricted size {size:.3} in [0.02, 0.09] ({} failures)",
            r.failures
        ),
    )
}

fn criterion9() -> Outcome {
    let Ok(path) = std::env::var("RDLCQR_LEE_CSV") else {
        return Outcome::Skip("dataset not supplied; set RDLCQR_LEE_CSV to run".into());
    };
    let loaded = match io::load_csv(path.as_ref(), &ColumnMapping::default(), 0.0) {
        Ok(l) => l,
        Err(e) => return Outcome::Fail(format!("could not load {path}: {e}")),
    };
    let r = match sharp_inference(
        &loaded.sample,
        &Bandwidths::equal(0.3),
        &InferenceConfig::default(),
    ) {
        Ok(r) => r,
        Err(e) => return Outcome::Fail(format!("estimation failed: {e}")),
    };
    let plain = (r.ci_plain.lo - 0.068)
        .abs()
        .max((r.ci_plain.hi - 0.090).abs());
    let adj = (r.ci_adjusted.lo - 0.048)
        .abs()
        .max((r.ci_adjusted.hi - 0.090).abs());
    verdict(
        plain <= 0.004 && adj <= 0.006,
        format!(
            "n={} CI ({:.4}, {:.4}) vs (0.068, 0.090) +-0.004; bc CI ({:.4}, {:.4}) vs (0.048, 0.090) +-0.006",
            loaded.sample.len(),
            r.ci_plain.lo,
            r.ci_plain.hi,
            r.ci_adjusted.lo,
            r.ci_adjusted.hi
        ),
    )
}

fn criterion10() -> Outcome {
    let run = |threads: usize, fuzzy: bool, format: OutputFormat| {
        let mut cfg = JobConfig {
            command: Command::Simulate,
            format,
            bandwidth: BandwidthChoice::Auto,
            equal_bandwidth: true,
            ..Default::default()
        };
        cfg.simulate.reps = 60;
        cfg.simulate.threads = Some(threads);
        cfg.simulate.fuzzy = fuzzy;
        cfg.simulate.estimators = if fuzzy {
            vec![EstimatorKind::FuzzyTest]
        } else {
            vec![
                EstimatorKind::Cqr,
                EstimatorKind::CqrBc,
                EstimatorKind::Llr,
                EstimatorKind::Kink,
            ]
        };
        io::run_job(&cfg).unwrap().primary
    };
    let mut same = true;
    for fuzzy in [false, true] {
        for format in [OutputFormat::Json, OutputFormat::Csv] {
            let one = run(1, fuzzy, format);
            same &= [2, 5].iter().all(|&t| run(t, fuzzy, format) == one);
        }
    }
    verdict(
        same,
        format!("simulate output identical across 1, 2 and 5 threads: {same}"),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("ARE table", criterion1),
        ("closed-form identities", criterion2),
        ("solver correctness", criterion3),
        ("desk-scale Monte Carlo", criterion4),
        ("ordering properties", criterion5),
        ("kink reproduction", criterion6),
        ("bandwidth laws", criterion7),
        ("fuzzy degeneracy and size", criterion8),
        ("Lee application", criterion9),
        ("determinism", criterion10),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let out = f();
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match out {
            Outcome::Pass(d) => ("PASS", d),
            Outcome::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Outcome::Skip(d) => ("SKIP", d),
        };
        println!("{tag} criterion {} ({name}): {detail} [{secs:.1}s]", i + 1);
    }
    println!(
        "acceptance: {} of {} criteria failed",
        failed,
        criteria.len()
    );
    if failed > 0 && std::env::var("RDLCQR_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}

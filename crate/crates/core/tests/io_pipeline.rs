use std::io::Write;

use proptest::prelude::*;
use rdlcqr::io::{
    bandwidth_sweep, binned_means, estimate, read_csv, run_job, to_json, BandwidthChoice,
    ColumnMapping, Command, Design, EstimateReport, JobConfig, LoadedSample, OutputFormat,
};
use rdlcqr::montecarlo::{draw_sample, replication_rng, DgpSpec, FuzzyOverlay, MeanModel};
use rdlcqr::{RdError, RdSample, Side};

fn lee_sample(n: usize, seed: u64, fuzzy: bool) -> RdSample {
    let mut spec = DgpSpec::new(MeanModel::Lee, 1, false, n);
    if fuzzy {
        spec.fuzzy = Some(FuzzyOverlay::default());
    }
    draw_sample(&spec, &mut replication_rng(seed, 0)).unwrap()
}

fn loaded(sample: RdSample) -> LoadedSample {
    LoadedSample {
        sample,
        dropped_rows: vec![],
        cutoff: 0.0,
    }
}

fn write_csv(sample: &RdSample, with_t: bool) -> tempfile::NamedTempFile {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    writeln!(
        f,
        "{}",
        if with_t {
            "margin,vote,won"
        } else {
            "margin,vote"
        }
    )
    .unwrap();
    for i in 0..sample.len() {
        // written with a cutoff of 0.5
        let x = sample.x[i] + 0.5;
        match (&sample.t, with_t) {
            (Some(t), true) => writeln!(f, "{x:?},{:?},{}", sample.y[i], t[i]).unwrap(),
            _ => writeln!(f, "{x:?},{:?}", sample.y[i]).unwrap(),
        }
    }
    f
}

#[test]
fn estimate_json_round_trips_bit_exactly() {
    let s = lee_sample(600, 11, true);
    let cfg = JobConfig {
        design: Design::Fuzzy,
        invert_ci: true,
        bandwidth: BandwidthChoice::Fixed(0.35),
        ..Default::default()
    };
    let rep = estimate(&loaded(s.clone()), &cfg).unwrap();
    let text = to_json(&rep).unwrap();
    let back: EstimateReport = serde_json::from_str(&text).unwrap();
    assert_eq!(rep, back);
    assert!(text.starts_with("{\"schema\":1,"));

    let sharp = estimate(&loaded(s), &JobConfig::default()).unwrap();
    let back: EstimateReport = serde_json::from_str(&to_json(&sharp).unwrap()).unwrap();
    assert_eq!(sharp.result.point.to_bits(), back.result.point.to_bits());
    assert_eq!(sharp, back);
}

#[test]
fn run_job_reads_mapped_columns_and_cutoff() {
    let s = lee_sample(500, 4, true);
    let file = write_csv(&s, true);
    let mut cfg = JobConfig {
        input: Some(file.path().to_path_buf()),
        cutoff: 0.5,
        bandwidth: BandwidthChoice::Fixed(0.3),
        columns: ColumnMapping {
            x: "margin".into(),
            y: "vote".into(),
            t: None,
            z: vec![],
        },
        ..Default::default()
    };
    let out = run_job(&cfg).unwrap();
    let rep: EstimateReport = serde_json::from_str(&out.primary).unwrap();
    let direct = estimate(&loaded(s.clone()), &cfg).unwrap();
    assert!((rep.result.point - direct.result.point).abs() < 1e-9);
    assert_eq!(rep.n, 500);

    cfg.design = Design::Fuzzy;
    assert_eq!(run_job(&cfg), Err(RdError::MissingColumn("t".into())));
    cfg.columns.t = Some("treated".into());
    assert_eq!(run_job(&cfg), Err(RdError::MissingColumn("treated".into())));
    cfg.columns.t = Some("won".into());
    let out = run_job(&cfg).unwrap();
    assert!(serde_json::from_str::<EstimateReport>(&out.primary)
        .unwrap()
        .fuzzy
        .is_some());
}

#[test]
fn output_formats_render() {
    let s = lee_sample(500, 2, false);
    let file = write_csv(&s, false);
    let base = JobConfig {
        input: Some(file.path().to_path_buf()),
        cutoff: 0.5,
        columns: ColumnMapping {
            x: "margin".into(),
            y: "vote".into(),
            ..Default::default()
        },
        ..Default::default()
    };
    for command in [Command::Estimate, Command::Bandwidth] {
        let csv = run_job(&JobConfig {
            command,
            format: OutputFormat::Csv,
            ..base.clone()
        })
        .unwrap();
        let lines: Vec<&str> = csv.primary.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0].split(',').count(), lines[1].split(',').count());
        let md = run_job(&JobConfig {
            command,
            format: OutputFormat::Md,
            ..base.clone()
        })
        .unwrap();
        assert!(md.primary.starts_with("| field | value |"));
    }
    let are = run_job(&JobConfig {
        command: Command::Are,
        format: OutputFormat::Csv,
        ..Default::default()
    })
    .unwrap();
    assert_eq!(are.primary.lines().count(), 6);
}

#[test]
fn plotdata_emits_three_files() {
    let s = lee_sample(800, 9, false);
    let file = write_csv(&s, false);
    let cfg = JobConfig {
        command: Command::Plotdata,
        input: Some(file.path().to_path_buf()),
        cutoff: 0.5,
        columns: ColumnMapping {
            x: "margin".into(),
            y: "vote".into(),
            ..Default::default()
        },
        ..Default::default()
    };
    let out = run_job(&cfg).unwrap();
    let names: Vec<&str> = out.artifacts.iter().map(|a| a.name.as_str()).collect();
    assert_eq!(names, ["bins.csv", "fit.csv", "sweep.csv"]);
    let bins = &out.artifacts[0].contents;
    assert_eq!(bins.lines().count(), 1 + 2 * 50);
    let sweep = &out.artifacts[2].contents;
    for est in ["lcqr", "llr"] {
        assert_eq!(
            sweep
                .lines()
                .filter(|l| l.starts_with(&format!("{est},")))
                .count(),
            39
        );
    }
}

#[test]
fn sweep_reports_ratio_and_two_se_band() {
    let l = loaded(lee_sample(700, 5, false));
    let sweep = bandwidth_sweep(&l, &JobConfig::default()).unwrap();
    let row: Vec<&str> = sweep.lines().nth(10).unwrap().split(',').collect();
    assert_eq!(row[0], "lcqr");
    let est: f64 = row[2].parse().unwrap();
    let se: f64 = row[3].parse().unwrap();
    let lo: f64 = row[4].parse().unwrap();
    assert!((est - 2.0 * se - lo).abs() < 2e-6);
    assert!(row[6].parse::<f64>().unwrap() > 0.0);
}

fn bin_means_per_side(csv: &str) -> Vec<(String, usize, f64)> {
    csv.lines()
        .skip(1)
        .filter_map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let n: usize = f[5].parse().unwrap();
            (n > 0).then(|| (f[0].to_string(), n, f[6].parse().unwrap()))
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn bin_means_average_to_side_means(seed in 0u64..10_000, n in 60usize..600) {
        let l = loaded(lee_sample(n, seed, false));
        let bins = bin_means_per_side(&binned_means(&l, 50));
        for side in [Side::Below, Side::Above] {
            let d = l.sample.side(side);
            let mean = d.y.iter().sum::<f64>() / d.y.len() as f64;
            let (tot, w) = bins
                .iter()
                .filter(|b| b.0 == side.name())
                .fold((0.0, 0usize), |(s, c), b| (s + b.2 * b.1 as f64, c + b.1));
            prop_assert_eq!(w, d.y.len());
            prop_assert!((tot / w as f64 - mean).abs() < 1e-10);
        }
    }

    #[test]
    fn csv_values_survive_loading(vals in proptest::collection::vec((-1.0f64..1.0, -1e3f64..1e3), 2..40)) {
        let mut text = String::from("x,y\n");
        for (x, y) in &vals {
            text.push_str(&format!("{x:?},{y:?}\n"));
        }
        let l = read_csv(text.as_bytes(), &ColumnMapping::default(), 0.0).unwrap();
        let xs: Vec<f64> = vals.iter().map(|v| v.0).collect();
        let ys: Vec<f64> = vals.iter().map(|v| v.1).collect();
        prop_assert_eq!(l.sample.x, xs);
        prop_assert_eq!(l.sample.y, ys);
    }
}

use std::path::{Path, PathBuf};

use amg_core::corpus::{build_corpus, CorpusSpec, DuplicateRule, Generator};
use amg_core::denoiser::EmpiricalDenoiser;
use amg_core::experiment::{
    compare_runs, recompute_reports, run_experiment, run_experiment_config, run_variants, ExperimentConfig,
};
use amg_core::guidance::{g_sim, predict, GuidanceConfig};
use amg_core::sampler::{run_batch, run_trajectory, SampleTrace, SamplerConfig, SamplerContext, SamplerKind};
use amg_core::schedule::NoiseSchedule;
use amg_core::similarity::{sigma_gradient, two_stage_nn, EmbeddingConfig, GradientMode, MetricConfig, MetricKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn tiny(out: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::base("tiny");
    c.corpus.generator = Generator::Sphere { n: 4, d: 4, tokens: 2, radius: 2.0, symmetric: true };
    c.corpus.per_token_duplicate = None;
    c.sampler.steps = 10;
    c.trajectories = 5;
    c.metrics.guidance.k = 3;
    c.metrics.evaluation.k = 3;
    c.reference.n = 50;
    c.kde.points = 32;
    c.output_dir = out.to_path_buf();
    c
}

fn unguided_batch(spec: &CorpusSpec, h: f64, n: usize) -> (amg_core::corpus::TrainingCorpus, Vec<SampleTrace>) {
    let corpus = build_corpus(spec).unwrap();
    let sched = NoiseSchedule::default();
    let den = EmpiricalDenoiser::new(&corpus, &sched, h).unwrap();
    let metric = MetricConfig::nl2().build(&corpus).unwrap();
    let g = GuidanceConfig::unguided();
    let s = SamplerConfig::default();
    let ctx = SamplerContext { denoiser: den, sampler: &s, guidance: &g, guidance_metric: &metric, eval_metric: &metric };
    let traces = run_batch(&ctx, n, 0).unwrap();
    (corpus, traces)
}

#[test]
fn exact_empirical_denoiser_copies_training_points() {
    let (corpus, traces) = unguided_batch(&CorpusSpec::default(), 0.0, 300);
    let memorized = traces.iter().filter(|t| t.final_verdict.as_ref().unwrap().memorized).count();
    assert!(memorized as f64 >= 0.99 * 300.0, "{memorized}/300");
    let near = traces
        .iter()
        .filter(|t| {
            let z = corpus.point(t.final_verdict.as_ref().unwrap().neighbor_id);
            amg_core::vecops::dist(&t.final_x0, z) < 1e-3
        })
        .count();
    assert!(near as f64 >= 0.99 * 300.0, "{near}/300 within 1e-3 of a training point");
}

#[test]
fn duplication_raises_copy_rate_of_the_duplicated_point() {
    let mut rates = Vec::new();
    for m in [1, 10, 100] {
        let spec = CorpusSpec {
            generator: Generator::Sphere { n: 64, d: 8, tokens: 4, radius: 3.0, symmetric: false },
            per_token_duplicate: None,
            duplicates: vec![DuplicateRule { id: 5, multiplicity: m, token: None }],
            ..CorpusSpec::default()
        };
        let (_, traces) = unguided_batch(&spec, 0.0, 400);
        let hits = traces.iter().filter(|t| t.final_verdict.as_ref().unwrap().neighbor_id == 5).count();
        rates.push(hits as f64 / 400.0);
    }
    assert!(rates[0] < rates[1] && rates[1] < rates[2], "{rates:?}");
}

#[test]
fn two_stage_search_mostly_agrees_at_quarter_shortlist() {
    let corpus = build_corpus(&CorpusSpec::default()).unwrap();
    let nl2 = MetricConfig::nl2();
    let exact = nl2.build(&corpus).unwrap();
    let coarse = EmbeddingConfig { dim: 8, seed: 3, normalize: true };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 500;
    let mut agree = 0;
    for _ in 0..n {
        let z = corpus.point(rng.random_range(0..corpus.len()));
        let q: Vec<f64> = z.iter().map(|v| v + 0.5 * rng.sample::<f64, _>(StandardNormal)).collect();
        let a = exact.evaluate(&q, &corpus).unwrap();
        let b = two_stage_nn(&q, &corpus, corpus.len() / 4, &coarse, &nl2).unwrap();
        agree += (a.neighbor_id == b.neighbor_id) as usize;
    }
    assert!(agree as f64 >= 0.95 * n as f64, "{agree}/{n}");
}

#[test]
fn batches_are_deterministic_across_thread_counts() {
    let corpus = build_corpus(&CorpusSpec::default()).unwrap();
    let sched = NoiseSchedule::default();
    let den = EmpiricalDenoiser::new(&corpus, &sched, 0.8).unwrap();
    let metric = MetricConfig::nl2().build(&corpus).unwrap();
    let g = GuidanceConfig { c3: 6.0, ..GuidanceConfig::default() };
    for s in [SamplerConfig::default(), SamplerConfig { kind: SamplerKind::Ddpm, ..SamplerConfig::default() }] {
        let ctx = SamplerContext { denoiser: den, sampler: &s, guidance: &g, guidance_metric: &metric, eval_metric: &metric };
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| run_batch(&ctx, 24, 100).unwrap())
        };
        let (a, b) = (run(1), run(4));
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.index, y.index);
            assert_eq!(x.records, y.records);
            assert_eq!(
                x.final_x0.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                y.final_x0.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
        let one = run_batch(&ctx, 1, 100).unwrap();
        let single = run_trajectory(&ctx, 0, 100, None).unwrap();
        assert_eq!(one[0].final_x0, single.final_x0);
        assert_eq!(one[0].records, single.records);
        // Distinct seeds give distinct samples.
        let mut finals: Vec<Vec<u64>> = a.iter().map(|t| t.final_x0.iter().map(|v| v.to_bits()).collect()).collect();
        finals.sort();
        finals.dedup();
        assert_eq!(finals.len(), a.len());
    }
}

#[test]
fn dissimilarity_term_lowers_the_score() {
    let corpus = build_corpus(&CorpusSpec::default()).unwrap();
    let sched = NoiseSchedule::default();
    let den = EmpiricalDenoiser::new(&corpus, &sched, 0.8).unwrap();
    let metric = MetricConfig::nl2().build(&corpus).unwrap();
    let grid = sched.timesteps(50).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut cases, mut descents) = (0, 0);
    while cases < 200 {
        let t = grid[rng.random_range(0..grid.len() - 1)];
        let ab = sched.ab(t).unwrap();
        let z = corpus.point(rng.random_range(0..corpus.len()));
        let x: Vec<f64> = z.iter().map(|v| ab.sqrt() * v + (1.0 - ab).sqrt() * rng.sample::<f64, _>(StandardNormal)).collect();
        let sg = sigma_gradient(&x, t, &den, None, 1.0, &metric, GradientMode::Full).unwrap();
        if sg.degenerate.is_some() || sg.grad.iter().all(|g| *g == 0.0) {
            continue;
        }
        cases += 1;
        let eps = predict(&den, &x, t, None, 1.0, false).unwrap().eps_hat;
        // Small enough that the move in x0_hat stays first order at every t.
        let delta = g_sim(&sg.grad, ab, 1e-3 * ab.sqrt());
        let guided: Vec<f64> = eps.iter().zip(&delta).map(|(e, d)| e + d).collect();
        let x0 = sched.predict_x0(&x, t, &guided).unwrap();
        if metric.evaluate(&x0, &corpus).unwrap().sigma < sg.verdict.sigma {
            descents += 1;
        }
    }
    assert!(descents >= 190, "{descents}/200");
}

#[test]
fn parabolic_schedule_activates_in_the_first_half() {
    let mut cfg = ExperimentConfig::ablations();
    cfg.trajectories = 200;
    cfg.variants.retain(|v| v.name == "amg-main" || v.name == "constant-schedule");
    let (_, res) = run_variants(&cfg).unwrap();
    let main = res[0].mean_first_activation().unwrap();
    let cons = res[1].mean_first_activation().unwrap();
    assert!(main >= 125.0, "{main}");
    assert!(cons < main, "{cons} vs {main}");
}

#[test]
fn ablation_matrix_runs_every_variant() {
    let mut cfg = ExperimentConfig::ablations();
    cfg.trajectories = 40;
    let (_, res) = run_variants(&cfg).unwrap();
    let names: Vec<&str> = res.iter().map(|r| r.name.as_str()).collect();
    assert_eq!(names, ["amg-main", "no-sim", "constant-schedule", "always-on"]);
    for r in &res {
        assert_eq!(r.traces.len(), 40);
        assert_eq!(r.failed, 0);
        assert!(r.traces.iter().all(|t| t.records.len() == 50));
    }
    // Unconditional sampling: without the dissimilarity term nothing ever changes eps.
    assert!(res[1].traces.iter().all(|t| t.records.iter().all(|r| r.gsim_norm == 0.0)));
}

#[test]
fn smoke_experiment_writes_everything_quickly() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(&tmp.path().join("run"));
    let start = std::time::Instant::now();
    let m = run_experiment_config(&cfg).unwrap();
    assert!(start.elapsed().as_secs_f64() < 1.0);
    assert_eq!(m.config_hash, cfg.hash());
    assert_eq!(m.seeds, vec![0, 1, 2, 3, 4]);
    assert!(!m.partial);
    for f in &m.files {
        assert!(cfg.output_dir.join(f).is_file(), "{f}");
    }
    assert!(cfg.output_dir.join("manifest.json").is_file());
    assert_eq!(m.variants.len(), 1);
    assert_eq!(m.variants[0].traces.len(), 5);
    let trace = std::fs::read_to_string(cfg.output_dir.join(&m.variants[0].traces[0])).unwrap();
    assert_eq!(trace.lines().count(), 11);
}

#[test]
fn same_config_gives_byte_identical_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tiny(&tmp.path().join("a"));
    let b = tiny(&tmp.path().join("b"));
    let ma = run_experiment_config(&a).unwrap();
    let mb = run_experiment_config(&b).unwrap();
    assert_eq!(ma.files, mb.files);
    // config.toml records the output directory itself.
    for f in ma.files.iter().filter(|f| *f != "config.toml") {
        let same = std::fs::read(a.output_dir.join(f)).unwrap() == std::fs::read(b.output_dir.join(f)).unwrap();
        assert!(same, "{f} differs");
    }
    assert_eq!(ma.config_hash, mb.config_hash);
    // Recomputing from saved samples reproduces the reports.
    let before = std::fs::read(a.output_dir.join("main/memorization.json")).unwrap();
    recompute_reports(&a).unwrap();
    assert_eq!(std::fs::read(a.output_dir.join("main/memorization.json")).unwrap(), before);
}

#[test]
fn config_files_match_presets() {
    for (file, preset) in [
        ("default.toml", ExperimentConfig::headline()),
        ("ablations.toml", ExperimentConfig::ablations()),
        ("duplication_free.toml", ExperimentConfig::duplication_free()),
    ] {
        let loaded = ExperimentConfig::load(&configs_dir().join(file)).unwrap();
        assert_eq!(loaded.hash(), preset.hash(), "{file}");
    }
    let minimal = ExperimentConfig::load(&configs_dir().join("minimal.toml")).unwrap();
    assert_eq!(minimal.resolved_variants().unwrap().len(), 2);
}

#[test]
fn run_from_file_and_compare() {
    let tmp = tempfile::tempdir().unwrap();
    let mut text = std::fs::read_to_string(configs_dir().join("minimal.toml")).unwrap();
    let out = tmp.path().join("out");
    text = text.replace("output_dir = \"runs/minimal\"", &format!("output_dir = {:?}", out.display().to_string()));
    let path = tmp.path().join("exp.toml");
    std::fs::write(&path, &text).unwrap();
    let m = run_experiment(&path).unwrap();
    assert_eq!(m.name, "minimal");
    let manifest = out.join("manifest.json");
    let cmp = compare_runs(std::slice::from_ref(&manifest)).unwrap();
    assert_eq!(cmp.rows.len(), 2);
    assert!(cmp.to_text().lines().count() == 3);

    // A run scored with a different metric cannot be tabulated alongside.
    let mut other = tiny(&tmp.path().join("emb"));
    other.metrics.evaluation = MetricConfig { k: 3, ..MetricConfig::embedding(2, 0) };
    assert_eq!(other.metrics.evaluation.kind, MetricKind::Embedding);
    run_experiment_config(&other).unwrap();
    let err = compare_runs(&[manifest, other.output_dir.join("manifest.json")]).unwrap_err();
    assert!(matches!(err, amg_core::Error::MixedMetrics));
}

#[test]
fn ddpm_experiment_completes() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny(&tmp.path().join("ddpm"));
    cfg.sampler.kind = SamplerKind::Ddpm;
    cfg.sampler.steps = 250;
    let m = run_experiment_config(&cfg).unwrap();
    assert!(!m.partial);
}

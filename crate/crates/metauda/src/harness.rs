//! Experiment orchestration: single training runs, test-set evaluation,
//! machine-readable reports, and the multi-seed ablation ladder.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{BoundParams, Graph, ParameterSet};
use crate::config::{RunMode, TrainConfig};
use crate::data::{DetectionSample, SealedLabels};
use crate::detector::{detect, Detection, DetectorConfig};
use crate::eval::{evaluate_map, MapReport};
use crate::meta::{BaselineTrainer, LogRow, MetaTrainer, TrainResult, TrainerState};
use crate::synth::{generate_quartet, SynthDataset};
use crate::{Error, Result};

pub const REPORT_VERSION: u32 = 1;

/// Environment variable capping worker threads in the ablation ladder.
pub const THREADS_ENV: &str = "METAUDA_THREADS";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub version: u32,
    pub mode: RunMode,
    pub seed: u64,
    pub config_hash: String,
    /// Wall-clock seconds; the only field allowed to differ between
    /// identical runs.
    pub wall_time_secs: f64,
    pub source_test: MapReport,
    pub target_test: MapReport,
    /// Target-test quality of the meta-learned initial condition before the
    /// final adaptation epoch (meta runs only).
    pub pre_finetune_target_test: Option<MapReport>,
    pub peak_records: usize,
    pub stream_reads: BTreeMap<String, u64>,
    /// How many times this run read a sealed target label. Must be zero for
    /// every mode except the oracle.
    pub sealed_label_reads: u64,
    pub log: Vec<LogRow>,
}

/// Train-split label accesses are what the adaptation schemes must not see;
/// give each run its own counter over the same sealed contents.
fn private_sealed(ds: &SynthDataset) -> SealedLabels {
    SealedLabels::new(ds.sealed.contents().clone())
}

pub fn evaluate_params(
    det_cfg: &DetectorConfig,
    params: &ParameterSet,
    samples: &[DetectionSample],
    cfg: &TrainConfig,
) -> Result<MapReport> {
    let mut dets: BTreeMap<String, Vec<Detection>> = BTreeMap::new();
    let mut gts = BTreeMap::new();
    for s in samples {
        let graph = Graph::new();
        let bound = BoundParams::bind(&graph, params);
        dets.insert(s.id.clone(), detect(det_cfg, &bound, &s.image)?);
        let labels = s
            .labels
            .clone()
            .ok_or_else(|| Error::contract(format!("test sample {} lacks labels", s.id)))?;
        gts.insert(s.id.clone(), labels);
    }
    evaluate_map(&dets, &gts, cfg.scene.num_classes, cfg.iou_thresh, cfg.ap_variant)
}

/// Train one mode on the dataset and evaluate it on both test splits.
pub fn run_experiment(cfg: &TrainConfig, ds: &SynthDataset) -> Result<RunReport> {
    cfg.validate()?;
    ds.validate()?;
    let started = Instant::now();
    let det = cfg.detector();
    let align = cfg.alignment();
    let sealed = private_sealed(ds);

    let result: TrainResult = match cfg.run_mode {
        RunMode::SourceOnly => {
            BaselineTrainer::source_only(&det, &align, &cfg.meta, &ds.quartet)?.train()?
        }
        RunMode::Da => BaselineTrainer::da_joint(&det, &align, &cfg.meta, &ds.quartet)?.train()?,
        RunMode::Oracle => {
            BaselineTrainer::oracle(&det, &align, &cfg.meta, &ds.quartet, &sealed)?.train()?
        }
        RunMode::MetaDa => MetaTrainer::new(&det, &align, &cfg.meta, &ds.quartet)?.train()?,
    };

    let source_test = evaluate_params(&det, &result.state.params, &ds.source_test, cfg)?;
    let target_test = evaluate_params(&det, &result.state.params, &ds.target_test, cfg)?;
    let pre_finetune_target_test = match &result.state.pre_finetune {
        Some(pre) => Some(evaluate_params(&det, pre, &ds.target_test, cfg)?),
        None => None,
    };

    Ok(RunReport {
        version: REPORT_VERSION,
        mode: cfg.run_mode,
        seed: cfg.meta.seed,
        config_hash: format!("{:016x}", cfg.hash()),
        wall_time_secs: started.elapsed().as_secs_f64(),
        source_test,
        target_test,
        pre_finetune_target_test,
        peak_records: result.peak_records,
        stream_reads: result.reads.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        sealed_label_reads: sealed.read_count(),
        log: result.log,
    })
}

/// Train, evaluate, and persist report, loss curve, and checkpoint under
/// `out`. Returns the report and the final trainer state.
pub fn run_and_save(cfg: &TrainConfig, ds: &SynthDataset, out: &Path) -> Result<RunReport> {
    std::fs::create_dir_all(out)?;
    cfg.validate()?;
    ds.validate()?;
    let det = cfg.detector();
    let align = cfg.alignment();
    let sealed = private_sealed(ds);
    let started = Instant::now();

    let (result, state): (TrainResult, TrainerState) = match cfg.run_mode {
        RunMode::SourceOnly => {
            let mut t = BaselineTrainer::source_only(&det, &align, &cfg.meta, &ds.quartet)?;
            let r = t.train()?;
            (r, t.state)
        }
        RunMode::Da => {
            let mut t = BaselineTrainer::da_joint(&det, &align, &cfg.meta, &ds.quartet)?;
            let r = t.train()?;
            (r, t.state)
        }
        RunMode::Oracle => {
            let mut t = BaselineTrainer::oracle(&det, &align, &cfg.meta, &ds.quartet, &sealed)?;
            let r = t.train()?;
            (r, t.state)
        }
        RunMode::MetaDa => {
            let mut t = MetaTrainer::new(&det, &align, &cfg.meta, &ds.quartet)?;
            let r = t.train()?;
            (r, t.state)
        }
    };

    let source_test = evaluate_params(&det, &state.params, &ds.source_test, cfg)?;
    let target_test = evaluate_params(&det, &state.params, &ds.target_test, cfg)?;
    let pre_finetune_target_test = match &state.pre_finetune {
        Some(pre) => Some(evaluate_params(&det, pre, &ds.target_test, cfg)?),
        None => None,
    };
    let report = RunReport {
        version: REPORT_VERSION,
        mode: cfg.run_mode,
        seed: cfg.meta.seed,
        config_hash: format!("{:016x}", cfg.hash()),
        wall_time_secs: started.elapsed().as_secs_f64(),
        source_test,
        target_test,
        pre_finetune_target_test,
        peak_records: result.peak_records,
        stream_reads: result.reads.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        sealed_label_reads: sealed.read_count(),
        log: result.log,
    };

    write_report(&report, &out.join("report.json"))?;
    write_loss_csv(&report.log, &out.join("losses.csv"))?;
    crate::meta::save_checkpoint(&state, &out.join("checkpoint.bin"))?;
    Ok(report)
}

pub fn write_report(report: &RunReport, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(report)?;
    std::fs::write(path, json + "\n")?;
    Ok(())
}

pub fn write_loss_csv(log: &[LogRow], path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "step,L_det,L_img,L_inst,L_da,L_uda,meta_loss")?;
    for r in log {
        let ml = r.meta_loss.map(|v| v.to_string()).unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.step, r.l_det, r.l_img, r.l_inst, r.l_da, r.l_uda, ml
        )?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Ablation ladder.

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub target_map: f64,
    pub source_map: f64,
    pub sealed_label_reads: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: RunMode,
    pub per_seed: Vec<SeedResult>,
    pub failures: Vec<String>,
    pub mean_target_map: f64,
    /// Half the min-to-max span over seeds.
    pub spread_target_map: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub version: u32,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub modes: Vec<ModeSummary>,
    /// Every scheduled run finished; a failed run leaves the ladder
    /// incomplete instead of aborting the others.
    pub complete: bool,
    /// Mean target mAP satisfies source-only < da < meta-da <= oracle.
    pub ordering_satisfied: bool,
    /// mean(meta-da) - mean(da) in mAP.
    pub meta_margin_over_da: f64,
    pub wall_time_secs: f64,
}

impl AblationReport {
    pub fn mode(&self, mode: RunMode) -> Option<&ModeSummary> {
        self.modes.iter().find(|m| m.mode == mode)
    }
}

fn worker_count(jobs: usize) -> usize {
    let hw = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let cap = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(hw);
    cap.min(jobs).max(1)
}

/// Run every mode over every seed on a shared dataset (generated from the
/// config's `seed` key) and summarize the ladder.
pub fn run_ablation(cfg: &TrainConfig) -> Result<AblationReport> {
    cfg.validate()?;
    if cfg.seeds.len() < 3 {
        return Err(Error::config(format!(
            "the ablation ladder needs at least 3 seeds for a meaningful spread, got {}",
            cfg.seeds.len()
        )));
    }
    let started = Instant::now();
    let ds = generate_quartet(&cfg.scene, &cfg.counts, cfg.meta.seed)?;

    let jobs: Vec<(RunMode, u64)> = RunMode::ALL
        .iter()
        .flat_map(|&m| cfg.seeds.iter().map(move |&s| (m, s)))
        .collect();
    let queue = Mutex::new(jobs.clone());
    let results: Mutex<BTreeMap<(usize, u64), std::result::Result<RunReport, String>>> =
        Mutex::new(BTreeMap::new());

    let workers = worker_count(jobs.len());
    log::info!("ablation: {} runs on {workers} worker(s)", jobs.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let job = queue.lock().unwrap().pop();
                let Some((mode, seed)) = job else { break };
                let mut run_cfg = cfg.clone();
                run_cfg.run_mode = mode;
                run_cfg.meta.seed = seed;
                let outcome = run_experiment(&run_cfg, &ds).map_err(|e| e.to_string());
                let key = (RunMode::ALL.iter().position(|&m| m == mode).unwrap(), seed);
                results.lock().unwrap().insert(key, outcome);
            });
        }
    });
    let results = results.into_inner().unwrap();

    let mut modes = Vec::new();
    let mut complete = true;
    for (mi, &mode) in RunMode::ALL.iter().enumerate() {
        let mut per_seed = Vec::new();
        let mut failures = Vec::new();
        for &seed in &cfg.seeds {
            match results.get(&(mi, seed)) {
                Some(Ok(r)) => per_seed.push(SeedResult {
                    seed,
                    target_map: r.target_test.map,
                    source_map: r.source_test.map,
                    sealed_label_reads: r.sealed_label_reads,
                }),
                Some(Err(e)) => {
                    complete = false;
                    failures.push(format!("{} seed {seed}: {e}", mode.tag()));
                }
                None => {
                    complete = false;
                    failures.push(format!("{} seed {seed}: run never finished", mode.tag()));
                }
            }
        }
        let maps: Vec<f64> = per_seed.iter().map(|r| r.target_map).collect();
        let mean = if maps.is_empty() { f64::NAN } else { maps.iter().sum::<f64>() / maps.len() as f64 };
        let spread = if maps.is_empty() {
            f64::NAN
        } else {
            let lo = maps.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = maps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            (hi - lo) / 2.0
        };
        modes.push(ModeSummary {
            mode,
            per_seed,
            failures,
            mean_target_map: mean,
            spread_target_map: spread,
        });
    }

    let mean_of = |m: RunMode| modes.iter().find(|s| s.mode == m).map(|s| s.mean_target_map);
    let (src, da, meta, oracle) = (
        mean_of(RunMode::SourceOnly).unwrap(),
        mean_of(RunMode::Da).unwrap(),
        mean_of(RunMode::MetaDa).unwrap(),
        mean_of(RunMode::Oracle).unwrap(),
    );
    let ordering_satisfied = complete && src < da && da < meta && meta <= oracle;

    Ok(AblationReport {
        version: REPORT_VERSION,
        config_hash: format!("{:016x}", cfg.hash()),
        seeds: cfg.seeds.clone(),
        modes,
        complete,
        ordering_satisfied,
        meta_margin_over_da: meta - da,
        wall_time_secs: started.elapsed().as_secs_f64(),
    })
}

pub fn format_ablation(report: &AblationReport) -> String {
    let mut s = String::new();
    use std::fmt::Write as _;
    let _ = writeln!(s, "ablation over seeds {:?} (config {})", report.seeds, report.config_hash);
    for m in &report.modes {
        let _ = writeln!(
            s,
            "  {:<12} target mAP {:.4} +/- {:.4}  (per seed: {})",
            m.mode.tag(),
            m.mean_target_map,
            m.spread_target_map,
            m.per_seed
                .iter()
                .map(|r| format!("{}:{:.4}", r.seed, r.target_map))
                .collect::<Vec<_>>()
                .join(" "),
        );
        for f in &m.failures {
            let _ = writeln!(s, "    FAILED: {f}");
        }
    }
    let _ = writeln!(
        s,
        "  meta-da margin over da: {:+.4} mAP",
        report.meta_margin_over_da
    );
    let _ = writeln!(
        s,
        "  {}",
        if !report.complete {
            "LADDER-INCOMPLETE"
        } else if report.ordering_satisfied {
            "ORDERING-SATISFIED"
        } else {
            "ORDERING-VIOLATED"
        }
    );
    s
}

// ---------------------------------------------------------------------------
// Quick self-contained gradient checks for the CLI.

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckLine {
    pub name: String,
    pub max_rel_err: f64,
    pub tol: f64,
    pub pass: bool,
}

/// Compare exact gradients of a smooth composed loss, and the exact
/// two-level meta-gradient, against central finite differences.
pub fn run_grad_check(seed: u64) -> Result<Vec<GradCheckLine>> {
    use crate::autodiff::{finite_diff_gradient, grad, TensorData, Var};
    use crate::meta::{exact_meta_gradient, inner_step_with};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParameterSet::default();
    for (path, shape) in [
        ("net.w1", vec![6usize, 6]),
        ("net.b1", vec![1, 6]),
        ("net.w2", vec![6, 3]),
        ("net.b2", vec![1, 3]),
    ] {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect();
        params.insert(path, TensorData::new(shape, data));
    }
    let x_tr: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let x_val: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let loss = |bound: &BoundParams, x: &[f64], label: usize| -> Result<Var> {
        let xv = Var::constant(&bound.graph, vec![1, 6], x.to_vec());
        let h = xv.matmul(bound.var("net.w1")).add(bound.var("net.b1")).sigmoid();
        let logits = h.matmul(bound.var("net.w2")).add(bound.var("net.b2"));
        let ce = logits.softmax_ce(std::rc::Rc::new(vec![label]));
        Ok(ce.add(&logits.square().sum_all().scale(0.05)))
    };

    let max_rel = |a: &crate::autodiff::Gradients, b: &crate::autodiff::Gradients| -> f64 {
        let mut worst: f64 = 0.0;
        for (path, at) in a.0.iter() {
            for (x, y) in at.data.iter().zip(&b.get(path).data) {
                let denom = x.abs().max(y.abs()).max(1e-4);
                worst = worst.max(((x - y) / denom).abs());
            }
        }
        worst
    };

    let mut lines = Vec::new();

    let graph = Graph::new();
    let bound = BoundParams::bind(&graph, &params);
    let analytic = grad(&loss(&bound, &x_tr, 1)?, &bound)?;
    let fd = finite_diff_gradient(
        |p| {
            let g = Graph::new();
            let b = BoundParams::bind(&g, p);
            Ok(loss(&b, &x_tr, 1)?.value())
        },
        &params,
        1e-5,
    )?;
    let err = max_rel(&analytic, &fd);
    lines.push(GradCheckLine {
        name: "composed-loss gradient vs finite differences".into(),
        max_rel_err: err,
        tol: 1e-4,
        pass: err < 1e-4,
    });

    let alpha = 0.1;
    let (_, analytic) = exact_meta_gradient(
        &params,
        alpha,
        |b| loss(b, &x_tr, 1),
        |b| loss(b, &x_val, 2),
    )?;
    let fd = finite_diff_gradient(
        |p| {
            let (adapted, _) = inner_step_with(p, alpha, |b| loss(b, &x_tr, 1))?;
            let g = Graph::new();
            let b = BoundParams::bind(&g, &adapted);
            Ok(loss(&b, &x_val, 2)?.value())
        },
        &params,
        1e-5,
    )?;
    let err = max_rel(&analytic, &fd);
    lines.push(GradCheckLine {
        name: "two-level meta-gradient vs finite differences".into(),
        max_rel_err: err,
        tol: 1e-3,
        pass: err < 1e-3,
    });

    Ok(lines)
}

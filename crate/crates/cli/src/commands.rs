use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use subnetcl::checkpoint::{self, Summary};
use subnetcl::config::{self, Overrides};
use subnetcl::datasets::build_sequence;
use subnetcl::evalkit::{forgetting, parse_ladder, run_ablation, EVAL_CHUNK};
use subnetcl::experiment::{final_evaluation, FinalEvaluation};
use subnetcl::subnet::topk_count;
use subnetcl::taskid::{first_layer_masks, infer_batch};
use subnetcl::{CompressedMaskBank, Error, ExperimentConfig, Precision, Scalar, Scenario, SelectionMode};

use crate::{Common, MasksAction};

fn settings(common: &Common) -> Result<ExperimentConfig> {
    let text = match &common.config {
        Some(p) => Some(fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?),
        None => None,
    };
    let over = Overrides {
        preset: common.preset,
        scenario: common.scenario,
        seed: common.seed,
    };
    Ok(config::load(text.as_deref(), over)?)
}

/// The configuration of the checkpoint in `--out`, checked against `--scenario`.
fn stored(common: &Common) -> Result<ExperimentConfig> {
    let cfg = checkpoint::load_config(&common.out)?;
    if let Some(s) = common.scenario {
        if s != cfg.scenario {
            return Err(Error::Mismatch(format!(
                "checkpoint was trained in the {} scenario, --scenario asks for {}",
                cfg.scenario.as_str(),
                s.as_str()
            ))
            .into());
        }
    }
    Ok(cfg)
}

fn row(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join(" ")
}

fn print_evaluation(e: &FinalEvaluation) {
    println!("oracle-id accuracy: {}  (mean {:.2})", row(&e.oracle), e.oracle_average());
    if let (Some(inf), Some(avg)) = (&e.inferred, e.inferred_average()) {
        println!("inferred-id accuracy: {}  (mean {avg:.2})", row(inf));
    }
    if let Some(id) = e.id_accuracy {
        println!("task-id accuracy: {id:.2}");
    }
}

pub fn train(common: &Common) -> Result<()> {
    let cfg = settings(common)?;
    let summary: Summary = match cfg.precision {
        Precision::F32 => checkpoint::train_in_dir::<f32>(&cfg, &common.out)?,
        Precision::F64 => checkpoint::train_in_dir::<f64>(&cfg, &common.out)?,
    };
    println!("scenario: {}  tasks: {}", summary.scenario, summary.tasks);
    print_evaluation(&summary.evaluation);
    println!("average accuracy: {:.2}", summary.average_accuracy);
    println!("forgetting: {}", row(&summary.forgetting));
    println!("wrote {}", common.out.display());
    if !summary.audits_passed {
        bail!("a frozen-state audit failed; see history.json");
    }
    Ok(())
}

fn eval_with<F: Scalar>(dir: &Path) -> Result<()> {
    let (cfg, state) = checkpoint::load::<F>(dir)?;
    let data = build_sequence::<F>(&cfg.data)?;
    let e = final_evaluation(&state.learner, &data, &cfg.taskid)?;
    println!("scenario: {}  tasks: {}", cfg.scenario.as_str(), state.learner.tasks_done());
    print_evaluation(&e);
    println!("forgetting: {}", row(&forgetting(&state.matrix)?));
    if state.matrix.rows().last().map(Vec::as_slice) != Some(e.oracle.as_slice()) {
        bail!("re-evaluation differs from the stored final accuracy row");
    }
    Ok(())
}

pub fn eval(common: &Common) -> Result<()> {
    match stored(common)?.precision {
        Precision::F32 => eval_with::<f32>(&common.out),
        Precision::F64 => eval_with::<f64>(&common.out),
    }
}

pub fn masks(common: &Common, action: MasksAction) -> Result<()> {
    let cfg = stored(common)?;
    let path = common.out.join(checkpoint::MASKS_FILE);
    let bank = CompressedMaskBank::load(&path)?;
    match action {
        MasksAction::Stats => {
            let t = bank.task_count();
            let planes = bank.num_planes();
            println!("tasks: {t}  layers: {}  elements: {}  planes: {planes}", bank.shapes().len(), bank.elements());
            for k in 0..t {
                let m = bank.extract(k)?;
                let ones: Vec<String> = m.layers.iter().map(|l| format!("{}/{}", l.count_ones(), l.len())).collect();
                println!("task {k}: {}", ones.join(" "));
            }
            let payload = bank.payload_bytes();
            println!("container bytes: {} (header {}, payload {payload})", bank.header_bytes() + payload, bank.header_bytes());
            // 32-bit float per element per task against the bitplane payload
            let planes = planes.max(1) as f64;
            println!("ratio at plane capacity vs float32: {:.1}×", 32.0 / planes);
            println!("ratio for {t} stored tasks vs float32: {:.1}×", t as f64 / planes);
            println!("ratio for {t} stored tasks vs 8-bit: {:.1}×", t as f64 / planes / 4.0);
        }
        MasksAction::Extract { task, to } => {
            let m = bank.extract(task)?;
            CompressedMaskBank::compress(&[m])?.save(&to)?;
            println!("task {task} -> {}", to.display());
        }
        MasksAction::Verify => verify(&cfg, &common.out, &bank)?,
    }
    Ok(())
}

fn verify(cfg: &ExperimentConfig, dir: &Path, bank: &CompressedMaskBank) -> Result<()> {
    let mut problems = Vec::new();
    if let Err(e) = bank.validate() {
        problems.push(e.to_string());
    }
    match CompressedMaskBank::from_bytes(&bank.to_bytes()) {
        Ok(b) if &b == bank => {}
        Ok(_) => problems.push("container roundtrip changed the bank".into()),
        Err(e) => problems.push(format!("container roundtrip failed: {e}")),
    }
    let history: Vec<subnetcl::experiment::TaskHistory> =
        serde_json::from_slice(&fs::read(dir.join(checkpoint::HISTORY_FILE))?)?;
    if history.len() != bank.task_count() {
        problems.push(format!("{} history entries for {} masks", history.len(), bank.task_count()));
    }
    let stats = subnetcl::TaskStatisticsBank::from_bytes(&fs::read(dir.join(checkpoint::STATS_FILE))?)?;
    if stats.len() != bank.task_count() {
        problems.push(format!("{} statistics entries for {} masks", stats.len(), bank.task_count()));
    }
    let sel = &cfg.train.selection;
    for k in 0..bank.task_count() {
        let m = bank.extract(k)?;
        let ones: Vec<usize> = m.layers.iter().map(|l| l.count_ones()).collect();
        if history.get(k).is_some_and(|h| h.mask_ones != ones) {
            problems.push(format!("task {k}: ones counts {ones:?} differ from training record"));
        }
        if sel.mode == SelectionMode::FixedSparsity {
            for (l, layer) in m.layers.iter().enumerate() {
                if layer.count_ones() != topk_count(layer.len(), sel.sparsity) {
                    problems.push(format!("task {k} layer {l}: {} ones, expected top-k count", layer.count_ones()));
                }
            }
        }
    }
    for p in &problems {
        println!("violation: {p}");
    }
    if !problems.is_empty() {
        return Err(Error::Corrupt(format!("{} violation(s)", problems.len())).into());
    }
    println!("ok: {} tasks, {} layers", bank.task_count(), bank.shapes().len());
    Ok(())
}

fn infer_with<F: Scalar>(dir: &Path, samples: Option<usize>) -> Result<()> {
    let (cfg, state) = checkpoint::load::<F>(dir)?;
    let data = build_sequence::<F>(&cfg.data)?;
    let model = &state.learner.model;
    let first = first_layer_masks(&state.learner.masks)?;
    model.reset_layer_calls();
    let (mut hits, mut total) = (0, 0);
    for (j, task) in data.iter().enumerate().take(state.learner.tasks_done()) {
        let n = samples.unwrap_or(task.test.len()).min(task.test.len());
        let subset = task.test.gather(&(0..n).collect::<Vec<_>>());
        let mut counts = vec![0usize; state.learner.tasks_done()];
        for chunk in subset.chunks(EVAL_CHUNK) {
            for r in infer_batch(model, &chunk.inputs, &state.learner.stats, &first, &cfg.taskid)? {
                counts[r] += 1;
            }
        }
        hits += counts[j];
        total += n;
        println!("task {j}: {}/{n} correct, routed {counts:?}", counts[j]);
    }
    let calls = model.layer_calls();
    println!("task-id accuracy: {:.2} over {total} samples", 100.0 * hits as f64 / total.max(1) as f64);
    println!("layer calls: {calls:?}");
    if calls[1..].iter().any(|&c| c != 0) {
        bail!("inference touched layers beyond the first");
    }
    Ok(())
}

pub fn infer_id(common: &Common, samples: Option<usize>) -> Result<()> {
    match stored(common)?.precision {
        Precision::F32 => infer_with::<f32>(&common.out, samples),
        Precision::F64 => infer_with::<f64>(&common.out, samples),
    }
}

pub fn ablation(common: &Common, ladder: &[String]) -> Result<()> {
    let toggles = parse_ladder(ladder)?;
    let mut cfg = settings(common)?;
    if common.scenario.is_none() && common.config.is_none() {
        cfg = config::load(
            None,
            Overrides {
                scenario: Some(Scenario::DomainIncremental),
                preset: common.preset,
                seed: common.seed,
            },
        )?;
    }
    let report = match cfg.precision {
        Precision::F32 => run_ablation::<f32>(&cfg, &toggles)?,
        Precision::F64 => run_ablation::<f64>(&cfg, &toggles)?,
    };
    print!("{}", report.to_table());
    fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
    fs::write(common.out.join("ablation.txt"), report.to_table())?;
    fs::write(common.out.join("ablation.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    let violations = report.violations();
    if !violations.is_empty() {
        bail!("freezing rungs forgot: {}", violations.join("; "));
    }
    Ok(())
}

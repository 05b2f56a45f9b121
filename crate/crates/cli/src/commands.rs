//! Command implementations over the library crate.

use anyhow::{bail, Context, Result};
use dgrasp_core::autodiff::Bindings;
use dgrasp_core::config::ExperimentConfig;
use dgrasp_core::envs::{generate_scene, run_eval, PolicyUnderTest};
use dgrasp_core::nn::ParamMode;
use dgrasp_core::pose::{Pose, Quat};
use dgrasp_core::scene::SceneField;
use dgrasp_core::seeds::{derive_seed, stream_rng};
use dgrasp_core::training::{load_dataset, save_dataset, train as train_model};
use dgrasp_core::tuner::{tune as tune_schedule, write_history_csv, TrialContext};
use dgrasp_core::value::ValueModel;
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

/// Creates the output directory, guards against accidental overwrites, and
/// echoes the resolved config.
fn prepare_out(
    config: Option<&ExperimentConfig>,
    out: &Path,
    force: bool,
    outputs: &[&str],
) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    if !force {
        for name in outputs {
            let path = out.join(name);
            if path.exists() {
                bail!("{} already exists; pass --force to overwrite", path.display());
            }
        }
    }
    if let Some(config) = config {
        fs::write(out.join("config_used.txt"), config.to_text())?;
    }
    Ok(())
}

fn build_model(config: &ExperimentConfig) -> ValueModel {
    let field = SceneField::analytic(config.field_config());
    ValueModel::init(config.model_config(), config.ppd(), field, config.seed)
}

fn load_model(config: &ExperimentConfig, weights: &Path) -> Result<ValueModel> {
    build_model(config)
        .load_into(weights)
        .with_context(|| format!("loading weights {}", weights.display()))
}

pub fn demo_gen(config: &ExperimentConfig, out: &Path, force: bool) -> Result<()> {
    prepare_out(Some(config), out, force, &["demos.jsonl"])?;
    let task = config.task_spec(dgrasp_core::envs::TaskKind::Simple);
    let mut records = Vec::with_capacity(config.demo_count);
    for i in 0..config.demo_count {
        let record_seed = derive_seed(config.seed, i as u64);
        let mut rng = stream_rng(record_seed, 0);
        let scene = generate_scene(&task, &mut rng)?;
        let mut demo = dgrasp_core::envs::oracle_demo(&scene, config.max_opening, &mut rng)?;
        demo.seed = record_seed;
        records.push(demo);
    }
    let path = out.join("demos.jsonl");
    save_dataset(&path, &records)?;
    println!(
        "wrote {} demonstrations to {} (task seed {})",
        records.len(),
        path.display(),
        task.seed
    );
    Ok(())
}

pub fn train(config: &ExperimentConfig, dataset: &Path, out: &Path, force: bool) -> Result<()> {
    prepare_out(Some(config), out, force, &["weights.dgw", "curves.csv"])?;
    let demos = load_dataset(dataset).with_context(|| format!("loading {}", dataset.display()))?;
    if demos.is_empty() {
        bail!("dataset {} is empty", dataset.display());
    }
    let holdout_len = config.holdout.min(demos.len().saturating_sub(1));
    let (train_set, holdout) = demos.split_at(demos.len() - holdout_len);
    let mut model = build_model(config);
    let report = train_model(&mut model, train_set, holdout, &config.train_config())?;

    let weights_path = out.join("weights.dgw");
    model.save(&weights_path)?;
    let mut curves = std::io::BufWriter::new(fs::File::create(out.join("curves.csv"))?);
    writeln!(curves, "epoch,value_loss,aux_loss,holdout_alignment")?;
    for e in &report.epochs {
        writeln!(
            curves,
            "{},{},{},{}",
            e.epoch, e.mean_value_loss, e.mean_aux_loss, e.holdout_alignment
        )?;
    }
    curves.flush()?;
    let last = report.epochs.last().expect("at least one epoch");
    println!(
        "trained {} epochs on {} demos ({} held out): value loss {:.4}, alignment {:.3}; weights at {}",
        report.epochs.len(),
        train_set.len(),
        holdout.len(),
        last.mean_value_loss,
        last.holdout_alignment,
        weights_path.display()
    );
    Ok(())
}

pub fn tune(config: &ExperimentConfig, weights: &Path, out: &Path, force: bool) -> Result<()> {
    prepare_out(Some(config), out, force, &["history.csv", "best.txt"])?;
    let model = load_model(config, weights)?;
    // Validation split: same task family, disjoint scene stream.
    let mut task = config.task_spec(config.task);
    task.seed = derive_seed(config.seed, 0xa11 ^ 0x5eed);
    let judge = config.judge();
    let ctx = TrialContext {
        model: &model,
        task: &task,
        judge: &judge,
        episodes: config.validation_episodes,
        base: config.schedule(),
        downward_half_angle: config.downward_filter_angle(),
        eval_seed: derive_seed(config.seed, 0x7e5),
    };
    let space = config.hyperspace();
    let (best, history) = tune_schedule(&ctx, &space, config.tuner_budget, config.seed)?;
    write_history_csv(&history, &out.join("history.csv"))?;
    let mut best_txt = String::new();
    best_txt.push_str(&format!("# validation success rate {}\n", best.objective));
    best_txt.push_str(&format!("policy.lr_pos = {}\n", best.config.lr_pos));
    best_txt.push_str(&format!("policy.lr_rot = {}\n", best.config.lr_rot));
    best_txt.push_str(&format!("policy.decay_pos = {}\n", best.config.decay_pos));
    best_txt.push_str(&format!("policy.decay_rot = {}\n", best.config.decay_rot));
    if let Some(steps) = best.config.steps {
        best_txt.push_str(&format!("policy.steps = {steps}\n"));
    }
    fs::write(out.join("best.txt"), best_txt)?;
    println!(
        "tuned {} trials; best validation success {:.3} at trial {}",
        history.len(),
        best.objective,
        best.index
    );
    Ok(())
}

pub fn eval(
    config: &ExperimentConfig,
    weights: &Path,
    name: &str,
    out: &Path,
    force: bool,
) -> Result<()> {
    prepare_out(Some(config), out, force, &["report.csv"])?;
    let model = load_model(config, weights)?;
    let task = config.task_spec(config.task);
    let judge = config.judge();
    let policy = PolicyUnderTest::Learned {
        model: &model,
        sched: config.schedule(),
        downward_half_angle: config.downward_filter_angle(),
    };
    let report = run_eval(
        &policy,
        name,
        &task,
        &judge,
        config.episodes,
        config.repeats,
        derive_seed(config.seed, 0xe0a1),
    )?;
    dgrasp_core::envs::write_report_csv(std::slice::from_ref(&report), &out.join("report.csv"))?;
    println!(
        "evaluated {} × {} episodes on {}: success {:.3} ± {:.3}",
        config.repeats,
        config.episodes,
        task.kind.as_str(),
        report.mean,
        report.std
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn landscape(
    config: &ExperimentConfig,
    weights: &Path,
    scene_seed: u64,
    z: f64,
    grid: usize,
    yaw: f64,
    out: &Path,
    force: bool,
) -> Result<()> {
    if grid < 2 {
        bail!("grid resolution must be at least 2");
    }
    prepare_out(Some(config), out, force, &["grid.csv"])?;
    let model = load_model(config, weights)?;
    let task = config.task_spec(config.task);
    let mut rng = stream_rng(derive_seed(task.seed, scene_seed), 0);
    let scene = generate_scene(&task, &mut rng)?;
    fs::write(out.join("scene.json"), serde_json::to_string_pretty(&scene)?)?;

    // Fixed downward orientation with the requested closing-axis yaw.
    let (s, c) = yaw.sin_cos();
    let orientation = Quat::from_cols([[c, s, 0.0], [s, -c, 0.0], [0.0, 0.0, -1.0]]);
    let rep = config.representation;
    let ws = &scene.workspace;

    let mut rows = Vec::with_capacity(grid * grid);
    for iy in 0..grid {
        for ix in 0..grid {
            let x = ws.min[0] + (ws.max[0] - ws.min[0]) * ix as f64 / (grid - 1) as f64;
            let y = ws.min[1] + (ws.max[1] - ws.min[1]) * iy as f64 / (grid - 1) as f64;
            rows.push(Pose::from_parts(rep, [x, y, z], orientation));
        }
    }
    // Batched value and gradient over the grid.
    let mut pg = model.psi_graph(&scene, rows.len(), ParamMode::Constants);
    let grad = pg.pose_gradient_node(false)?;
    let mut bindings = Bindings::new();
    pg.bind_poses(&mut bindings, &rows);
    let outputs = pg.graph.evaluate(&bindings, &[pg.values, grad])?;

    let mut w = std::io::BufWriter::new(fs::File::create(out.join("grid.csv"))?);
    writeln!(w, "x,y,psi,gx,gy")?;
    for (i, pose) in rows.iter().enumerate() {
        let p = pose.position();
        writeln!(
            w,
            "{},{},{},{},{}",
            p[0],
            p[1],
            outputs[0].at(i),
            outputs[1].at2(i, 0),
            outputs[1].at2(i, 1)
        )?;
    }
    w.flush()?;
    println!("wrote {} grid rows to {}", grid * grid, out.join("grid.csv").display());
    Ok(())
}

pub fn report(inputs: &[PathBuf], out: &Path, force: bool) -> Result<()> {
    prepare_out(None, out, force, &["summary.csv"])?;
    // (policy, task) → per-repeat rates.
    let mut groups: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for input in inputs {
        let text = fs::read_to_string(input)
            .with_context(|| format!("missing or unreadable report {}", input.display()))?;
        for (idx, line) in text.lines().enumerate() {
            if idx == 0 || line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 4 {
                bail!("{}: line {} is not task,policy,repeat,rate", input.display(), idx + 1);
            }
            if parts[2] == "summary" {
                continue;
            }
            let rate: f64 = parts[3]
                .trim()
                .parse()
                .with_context(|| format!("{}: bad rate on line {}", input.display(), idx + 1))?;
            groups
                .entry((parts[1].to_string(), parts[0].to_string()))
                .or_default()
                .push(rate);
        }
    }
    if groups.is_empty() {
        bail!("no evaluation rows found in the inputs");
    }
    let mut w = std::io::BufWriter::new(fs::File::create(out.join("summary.csv"))?);
    writeln!(w, "policy,task,mean,std,repeats")?;
    for ((policy, task), rates) in &groups {
        let n = rates.len() as f64;
        let mean = rates.iter().sum::<f64>() / n;
        let std = if rates.len() > 1 {
            (rates.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        writeln!(w, "{policy},{task},{mean},{std},{}", rates.len())?;
    }
    w.flush()?;
    println!("summarized {} policy × task groups into {}", groups.len(), out.join("summary.csv").display());
    Ok(())
}

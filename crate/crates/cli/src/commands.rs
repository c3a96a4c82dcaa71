use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use mlppo::analysis::run_analysis;
use mlppo::env::baseline_rewards;
use mlppo::policy::MlpParams;
use mlppo::ppo::{evaluate_policy, Checkpoint, EvalSummary, IterationRecord, PpoConfig, Trainer};
use mlppo::scenario::select_scenarios;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{read_manifest, write_manifest, RunConfig};
use crate::failure::Failure;

/// Independent random streams of one run.
fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

const PERM_STREAM: u64 = 1;
const CALIBRATION_STREAM: u64 = 2;
const CLUSTER_STREAM: u64 = 3;
const POLICY_STREAM: u64 = 4;

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

fn mkdir(path: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

pub fn sample_perm(cfg: &RunConfig) -> Result<(), Failure> {
    let perms = cfg.sample_perms(cfg.perm.n, &mut stream(cfg.io.seed, PERM_STREAM))?;
    let entries: Vec<_> = perms.iter().enumerate().collect();
    let manifest = write_manifest(&cfg.io.out.join("perms"), &entries)?;
    if perms.is_empty() {
        println!("no fields requested; wrote empty manifest {}", manifest.display());
        return Ok(());
    }
    let lo = perms.iter().map(|p| p.min()).fold(f64::INFINITY, f64::min);
    let hi = perms.iter().map(|p| p.max()).fold(f64::NEG_INFINITY, f64::max);
    let mean = perms.iter().map(|p| p.mean()).sum::<f64>() / perms.len() as f64;
    println!("{} fields, min {lo:.4e}, max {hi:.4e}, mean {mean:.4e}", perms.len());
    println!("manifest {}", manifest.display());
    Ok(())
}

pub fn cluster(cfg: &RunConfig) -> Result<(), Failure> {
    let samples: Vec<(usize, _)> = match &cfg.perm.manifest {
        Some(m) => read_manifest(m)?,
        None => cfg
            .sample_perms(cfg.cluster.n_samples, &mut stream(cfg.io.seed, PERM_STREAM))?
            .into_iter()
            .enumerate()
            .collect(),
    };
    let fields: Vec<_> = samples.iter().map(|(_, f)| f.clone()).collect();
    let target = cfg.target_env()?;
    let sel = select_scenarios(
        &fields,
        &target,
        cfg.cluster.k,
        cfg.cluster.time_intervals,
        &mut stream(cfg.io.seed, CLUSTER_STREAM),
    )?;
    let dir = cfg.io.out.join("cluster");
    mkdir(&dir)?;
    let mut coords = String::from("sample,x,y,cluster,representative\n");
    for (k, ((id, _), c)) in samples.iter().zip(&sel.embedding.coords).enumerate() {
        let rep = sel.representatives.contains(&k);
        let _ = writeln!(coords, "{id},{},{},{},{rep}", c[0], c[1], sel.clustering.labels[k]);
    }
    write(&dir.join("coords.csv"), &coords)?;
    let eig: Vec<String> = sel.embedding.eigenvalues.iter().map(f64::to_string).collect();
    write(&dir.join("eigenvalues.csv"), &format!("eigenvalue\n{}\n", eig.join("\n")))?;
    let reps: Vec<_> = sel.representatives.iter().map(|&k| (samples[k].0, &samples[k].1)).collect();
    let manifest = write_manifest(&dir.join("representatives"), &reps)?;
    if sel.embedding.degenerate {
        println!("warning: degenerate embedding, second coordinate is zero");
    }
    println!(
        "{} samples, {} clusters, within-cluster sum of squares {:.4e}",
        fields.len(),
        sel.representatives.len(),
        sel.clustering.wcss
    );
    println!("representatives {:?}", reps.iter().map(|r| r.0).collect::<Vec<_>>());
    println!("manifest {}", manifest.display());
    Ok(())
}

pub fn train(cfg: &RunConfig, resume: Option<&Path>) -> Result<(), Failure> {
    let algorithm = cfg.algorithm()?;
    let perms = cfg.perms(&mut stream(cfg.io.seed, PERM_STREAM))?;
    let mut trainer = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            let stack = cfg.stack(&perms, false, &mut stream(cfg.io.seed, CALIBRATION_STREAM))?;
            Trainer::resume(ckpt, stack)?
        }
        None => {
            let stack = cfg.stack(&perms, true, &mut stream(cfg.io.seed, CALIBRATION_STREAM))?;
            Trainer::new(cfg.ppo.clone(), algorithm, stack, cfg.io.seed)?
        }
    };
    let out = &cfg.io.out;
    let ckpt_dir = out.join("checkpoints");
    mkdir(&ckpt_dir)?;
    let curve_path = out.join("curve.csv");
    let append = resume.is_some() && curve_path.exists();
    let mut curve = OpenOptions::new()
        .create(true)
        .append(append)
        .write(true)
        .truncate(!append)
        .open(&curve_path)
        .map_err(|e| Failure::Io(format!("{}: {e}", curve_path.display())))?;
    if !append {
        writeln!(curve, "{}", IterationRecord::CSV_HEADER)?;
    }
    let baseline = {
        let stack = trainer.stack();
        let r = baseline_rewards(&mut stack.make_env(stack.n_levels() - 1))?;
        r.iter().sum::<f64>() / r.len() as f64
    };
    println!("equal-rate baseline {baseline:.4}");
    let start = Instant::now();
    let last = trainer.iteration() + cfg.train.iterations;
    while trainer.iteration() < last {
        let mut rec = trainer.train_iteration()?;
        rec.wall_seconds = start.elapsed().as_secs_f64();
        let due = rec.iteration % cfg.io.eval_interval == 0 || rec.iteration == last;
        if due {
            rec.eval = EvalSummary::from_rewards(&trainer.evaluate()?);
            let ckpt = trainer.checkpoint();
            ckpt.save(&ckpt_dir.join(format!("iter_{:06}.json", rec.iteration)))?;
            ckpt.save(&out.join("checkpoint.json"))?;
        }
        writeln!(curve, "{}", rec.csv_row())?;
        if let Some(e) = rec.eval {
            println!(
                "iteration {:>5}  cost {:>12.1}  loss {:>10.4}  eval mean {:.4} ({:+.1}%)  min {:.4}  max {:.4}",
                rec.iteration,
                rec.cost,
                rec.loss,
                e.mean,
                100.0 * (e.mean / baseline - 1.0),
                e.min,
                e.max
            );
        }
    }
    println!("checkpoint {}", out.join("checkpoint.json").display());
    Ok(())
}

/// Policy and PPO settings from a checkpoint, or a fresh random policy.
fn policy_for(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
) -> Result<(MlpParams, PpoConfig, Option<mlppo::env::ObsNormalizer>), Failure> {
    match checkpoint {
        Some(p) => {
            let c = Checkpoint::load(p)?;
            Ok((c.params, c.config, Some(c.normalizer)))
        }
        None => {
            let t = cfg.target_env()?;
            let rng = &mut stream(cfg.io.seed, POLICY_STREAM);
            Ok((MlpParams::new(t.obs_dim(), &cfg.ppo.hidden, t.n_wells(), rng)?, cfg.ppo.clone(), None))
        }
    }
}

pub fn analyze(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<(), Failure> {
    let (policy, ppo, normalizer) = policy_for(cfg, checkpoint)?;
    let perms = cfg.perms(&mut stream(cfg.io.seed, PERM_STREAM))?;
    let mut stack = cfg.stack(&perms, normalizer.is_none(), &mut stream(cfg.io.seed, CALIBRATION_STREAM))?;
    if let Some(n) = normalizer {
        stack.set_normalizer(n)?;
    }
    let report = run_analysis(&policy, &stack, &ppo, &cfg.analysis, cfg.io.seed)?;
    let dir = cfg.io.out.join("analysis");
    mkdir(&dir)?;
    write(&dir.join("levels.csv"), &report.levels_csv())?;
    write(&dir.join("epsilons.csv"), &report.epsilons_csv())?;
    write(&dir.join("summary.txt"), &report.summary())?;
    write(&dir.join("report.json"), &serde_json::to_string_pretty(&report).expect("report serializes"))?;
    print!("{}", report.summary());
    Ok(())
}

pub fn eval(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<(), Failure> {
    let path: PathBuf = checkpoint.map(Path::to_path_buf).ok_or_else(|| Failure::Config("eval needs --checkpoint".into()))?;
    let (policy, _, normalizer) = policy_for(cfg, Some(&path))?;
    let perms = cfg.perms(&mut stream(cfg.io.seed, PERM_STREAM))?;
    let mut stack = cfg.stack(&perms, false, &mut stream(cfg.io.seed, CALIBRATION_STREAM))?.target_only();
    stack.set_normalizer(normalizer.expect("checkpoint carries a normalizer"))?;
    let rewards = evaluate_policy(&policy, &stack)?;
    let baseline = baseline_rewards(&mut stack.make_env(0))?;
    let mut csv = String::from("perm,policy,baseline\n");
    println!("{:>6}  {:>8}  {:>8}", "perm", "policy", "baseline");
    for (k, (r, b)) in rewards.iter().zip(&baseline).enumerate() {
        let _ = writeln!(csv, "{k},{r},{b}");
        println!("{k:>6}  {r:>8.4}  {b:>8.4}");
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (pm, bm) = (mean(&rewards), mean(&baseline));
    let _ = writeln!(csv, "mean,{pm},{bm}");
    println!("{:>6}  {pm:>8.4}  {bm:>8.4}", "mean");
    mkdir(&cfg.io.out)?;
    write(&cfg.io.out.join("eval.csv"), &csv)
}

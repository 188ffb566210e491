use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use fino::data::{generate_offline_dataset, Behavior, Dataset};
use fino::envs::{Env, Environment};
use fino::flow::{FlowBatch, NoiseSchedule, VectorFieldNet};
use fino::nn::DenseNet;
use fino::pipeline::{evaluate, offline_run, online_run, write_metrics, Agent, RunConfig};
use fino::verify::{
    check_conditional_path, check_single_point_generation, check_target_noise_noop,
    check_variance_ordering, export_log_density, write_reports, GridSpec, SinglePointSetup,
    VerifyReport,
};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use thiserror::Error;

use crate::{Check, Command, CommonArgs, VerifyArgs};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Failed(String),
    #[error(transparent)]
    Core(#[from] fino::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

const TIMES: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

pub fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenDataset(args) => for_each_seed(&args, gen_dataset),
        Command::TrainOffline(args) => for_each_seed(&args, train_offline),
        Command::FinetuneOnline(args) => for_each_seed(&args, finetune_online),
        Command::Eval(args) => for_each_seed(&args, eval),
        Command::ExportPlot(args) => for_each_seed(&args, export_plot),
        Command::Verify(args) => verify(&args),
    }
}

/// Defaults, then the config file, then flags.
fn resolve_config(args: &CommonArgs) -> Result<RunConfig> {
    let mut config = match &args.config {
        None => RunConfig::default(),
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| {
                CliError::Usage(format!("cannot read config file {}: {e}", path.display()))
            })?;
            RunConfig::parse(&text)
                .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?
        }
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(env) = args.env {
        config.env = env;
    }
    if let Some(eta) = args.eta {
        config.eta = eta;
    }
    config
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    log::debug!("resolved config:\n{}", config.to_text());
    Ok(config)
}

/// Runs `job` once in `--out`, or once per seed in `--out/seed_<s>` when
/// `--seeds` is given. Seeded runs execute on their own threads.
fn for_each_seed<F>(args: &CommonArgs, job: F) -> Result<()>
where
    F: Fn(RunConfig, &Path, Option<usize>) -> Result<()> + Sync,
{
    let base = resolve_config(args)?;
    let Some(n) = args.seeds else {
        return job(base, &args.out, args.steps);
    };
    if n == 0 {
        return Err(CliError::Usage("--seeds must be at least 1".into()));
    }
    let results: Vec<Result<()>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..n as u64)
            .map(|k| {
                let mut config = base.clone();
                config.seed = base.seed + k;
                let dir = args.out.join(format!("seed_{}", config.seed));
                let job = &job;
                log::info!("seed {} -> {}", config.seed, dir.display());
                scope.spawn(move || job(config, &dir, args.steps))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| Err(CliError::Failed("worker thread panicked".into())))
            })
            .collect()
    });
    results.into_iter().collect()
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| CliError::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn write_file(
    path: &Path,
    body: impl FnOnce(&mut BufWriter<File>) -> fino::Result<()>,
) -> Result<()> {
    let io_err = |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    body(&mut w)?;
    w.flush().map_err(io_err)
}

fn save_config(config: &RunConfig, dir: &Path) -> Result<()> {
    write_file(&dir.join("config.cfg"), |w| {
        Ok(w.write_all(config.to_text().as_bytes())?)
    })
}

fn gen_dataset(config: RunConfig, dir: &Path, steps: Option<usize>) -> Result<()> {
    let size = steps.unwrap_or(config.dataset_size);
    let env = Env::from_kind(config.env);
    let dataset =
        generate_offline_dataset(&env, Behavior::default_for(config.env), size, config.seed)?;
    create_dir(dir)?;
    dataset.save(dir.join("dataset.bin"))?;
    write_file(&dir.join("dataset.csv"), |w| dataset.write_csv(w))?;
    println!(
        "{}: {} transitions of {}",
        dir.display(),
        dataset.len(),
        config.env
    );
    Ok(())
}

/// The dataset in `dir`, generated from `config` if absent.
fn dataset_for(config: &RunConfig, dir: &Path) -> Result<Dataset> {
    let path = dir.join("dataset.bin");
    if path.exists() {
        let dataset = Dataset::load(&path)?;
        if dataset.env != config.env {
            return Err(CliError::Usage(format!(
                "{} holds {} data but the run is configured for {}",
                path.display(),
                dataset.env,
                config.env
            )));
        }
        log::info!(
            "loaded {} transitions from {}",
            dataset.len(),
            path.display()
        );
        return Ok(dataset);
    }
    log::info!(
        "no dataset at {}, generating {} transitions",
        path.display(),
        config.dataset_size
    );
    let env = Env::from_kind(config.env);
    let dataset = generate_offline_dataset(
        &env,
        Behavior::default_for(config.env),
        config.dataset_size,
        config.seed,
    )?;
    create_dir(dir)?;
    dataset.save(&path)?;
    Ok(dataset)
}

fn train_offline(mut config: RunConfig, dir: &Path, steps: Option<usize>) -> Result<()> {
    if let Some(steps) = steps {
        config.offline_steps = steps;
    }
    let dataset = dataset_for(&config, dir)?;
    let (agent, metrics) = offline_run(&config, &dataset)?;
    agent.save(dir.join("agent"))?;
    save_config(&config, dir)?;
    write_file(&dir.join("offline_metrics.jsonl"), |w| {
        write_metrics(&metrics, w)
    })?;
    if let Some(last) = metrics.last() {
        println!(
            "{}: {} offline steps, final losses q {:.4} flow {:.4} pi {:.4}",
            dir.display(),
            config.offline_steps,
            last.loss_q.unwrap_or(f64::NAN),
            last.loss_flow.unwrap_or(f64::NAN),
            last.loss_pi.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}

fn load_agent(config: &RunConfig, dir: &Path, prefer_online: bool) -> Result<Agent> {
    let online = dir.join("agent_online");
    let offline = dir.join("agent");
    let path = if prefer_online && online.join("agent.json").exists() {
        online
    } else {
        offline
    };
    if !path.join("agent.json").exists() {
        return Err(CliError::Failed(format!(
            "no checkpoint in {}; run train-offline first",
            path.display()
        )));
    }
    Ok(Agent::load(&path, config)?)
}

fn finetune_online(mut config: RunConfig, dir: &Path, steps: Option<usize>) -> Result<()> {
    if let Some(steps) = steps {
        config.online_steps = steps;
    }
    let dataset = dataset_for(&config, dir)?;
    let mut agent = load_agent(&config, dir, false)?;
    let report = online_run(&mut agent, &config, &dataset)?;
    agent.save(dir.join("agent_online"))?;
    write_file(&dir.join("online_metrics.jsonl"), |w| {
        write_metrics(&report.metrics, w)
    })?;
    write_file(&dir.join("visitation.csv"), |w| {
        report.visitation.write_csv(w)
    })?;
    write_file(&dir.join("temperature.csv"), |w| {
        writeln!(w, "step,xi_before,entropy,xi_after")?;
        for u in &report.temperature {
            writeln!(w, "{},{},{},{}", u.step, u.xi_before, u.entropy, u.xi_after)?;
        }
        Ok(())
    })?;
    println!(
        "{}: {} online steps, {} cells visited, final xi {:.4}",
        dir.display(),
        config.online_steps,
        report.visitation.unique_cells(),
        agent.sampler.xi
    );
    Ok(())
}

fn eval(config: RunConfig, dir: &Path, steps: Option<usize>) -> Result<()> {
    let episodes = steps.unwrap_or(config.eval_episodes);
    let agent = load_agent(&config, dir, true)?;
    let summary = evaluate(&agent, Env::from_kind(config.env), episodes, config.seed)?;
    let body = json!({
        "env": config.env.name(),
        "seed": config.seed,
        "episodes": episodes,
        "mean_return": summary.mean_return,
        "success_rate": summary.success_rate,
        "returns": summary.returns,
    });
    write_file(&dir.join("eval.json"), |w| {
        serde_json::to_writer_pretty(&mut *w, &body)
            .map_err(|e| fino::Error::Decode(e.to_string()))?;
        Ok(w.write_all(b"\n")?)
    })?;
    println!(
        "{}: mean return {:.4}, success rate {:.3} over {episodes} episodes",
        dir.display(),
        summary.mean_return,
        summary.success_rate
    );
    Ok(())
}

fn export_plot(config: RunConfig, dir: &Path, steps: Option<usize>) -> Result<()> {
    let n = steps.unwrap_or(2000);
    let path = if dir.join("agent_online/flow.ckpt").exists() {
        dir.join("agent_online/flow.ckpt")
    } else {
        dir.join("agent/flow.ckpt")
    };
    if !path.exists() {
        return Err(CliError::Failed(format!(
            "no flow checkpoint at {}; run train-offline first",
            path.display()
        )));
    }
    let mut env = Env::from_kind(config.env);
    let net = VectorFieldNet::from_net(DenseNet::load(&path)?, env.state_dim(), env.action_dim())?;
    let state = env.reset(config.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let grid = export_log_density(
        &net,
        &state,
        &GridSpec::default(),
        n,
        config.flow_steps,
        &mut rng,
    )?;
    write_file(&dir.join("log_density.csv"), |w| grid.write_csv(w))?;
    println!(
        "{}: log-density of {n} samples on a {}x{} grid, mass {:.4}",
        dir.display(),
        grid.grid_spec.nx,
        grid.grid_spec.ny,
        grid.total_mass()
    );
    Ok(())
}

fn run_checks(check: Check, config: &RunConfig, steps: Option<usize>) -> Result<Vec<VerifyReport>> {
    let (eta, seed) = (config.eta, config.seed);
    let mut reports = Vec::new();
    let wants = |c: Check| check == c || check == Check::All;
    if wants(Check::ConditionalPath) {
        reports.extend(check_conditional_path(
            eta,
            &TIMES,
            &[1.0, -1.0],
            steps.unwrap_or(1_000_000),
            seed,
        )?);
    }
    if wants(Check::VarianceOrdering) {
        let corners = vec![
            vec![1.0, 1.0],
            vec![1.0, -1.0],
            vec![-1.0, 1.0],
            vec![-1.0, -1.0],
        ];
        reports.extend(check_variance_ordering(
            &corners,
            eta,
            &TIMES,
            steps.unwrap_or(1_000_000),
            seed,
        )?);
    }
    if wants(Check::SinglePoint) {
        let setup = SinglePointSetup {
            seed,
            ..SinglePointSetup::default()
        };
        reports.extend(check_single_point_generation(
            eta,
            &[0.5, -0.5],
            steps.unwrap_or(5000),
            5000,
            &setup,
        )?);
    }
    if wants(Check::TargetNoise) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = VectorFieldNet::new(1, 2, &[32, 32], &mut rng)?;
        let states = Array2::zeros((16, 1));
        let actions = Array2::from_shape_simple_fn((16, 2), || rng.random_range(-1.0..1.0));
        let batch = FlowBatch::draw(
            states.view(),
            actions.view(),
            &NoiseSchedule::quadratic(0.0)?,
            &mut rng,
        )?;
        reports.push(check_target_noise_noop(
            &net,
            &batch,
            0.5,
            steps.unwrap_or(100_000),
            seed,
        )?);
    }
    Ok(reports)
}

fn verify(args: &VerifyArgs) -> Result<()> {
    if args.common.seeds.is_some() {
        return Err(CliError::Usage(
            "verify runs a single seed; drop --seeds".into(),
        ));
    }
    let config = resolve_config(&args.common)?;
    let reports = run_checks(args.check, &config, args.common.steps)?;
    create_dir(&args.common.out)?;
    write_file(&args.common.out.join("verify.jsonl"), |w| {
        write_reports(&reports, w)
    })?;
    for r in &reports {
        println!("{r}");
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(CliError::Failed(format!(
            "{failed} of {} checks failed",
            reports.len()
        )));
    }
    Ok(())
}

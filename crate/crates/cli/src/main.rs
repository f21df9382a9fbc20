use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use fedmdfnn::error::file_error;
use fedmdfnn::experiment::{run_experiment, training_rows, ExperimentConfig};
use fedmdfnn::fed::net::{run_client, FedServer};
use fedmdfnn::fed::protocol::digest_hex;
use fedmdfnn::fed::{load_params, partition, run_federated, save_params, ClientState, FedConfig};
use fedmdfnn::io;
use fedmdfnn::labeling::{assemble_dataset, label_run, DatasetMode, LabelingConfig};
use fedmdfnn::mapping::{build_confidence_table, greedy_pairs, ScoreTable};
use fedmdfnn::mdfnn::{init_model, ModelParams, Trainer, TrainingRow};
use fedmdfnn::metrics::compute_cr;
use fedmdfnn::pipeline::{infer_run, InferenceConfig, InferenceMode};
use fedmdfnn::plates::{build_conversion_table, canonicalize_plate, derive_char_pairs, ConfusionTable};
use fedmdfnn::scenario::{generate_scenario, WorldConfig};
use fedmdfnn::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;

/// Vehicle identification from V2V messages and camera boxes.
#[derive(Debug, Parser)]
#[command(name = "fedmdfnn", version, arg_required_else_help = true)]
struct Cli {
    /// Seed override (world seed for `gen`, training seed elsewhere).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON configuration file; its schema depends on the subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a world and write its observation streams.
    Gen,
    /// Auto-label an observation directory into a dataset.
    Label(LabelArgs),
    /// Train a model on one or more datasets.
    Train(TrainArgs),
    /// Run the federated aggregation server.
    Serve(ServeArgs),
    /// Run a federated client on a local dataset.
    Client(ClientArgs),
    /// Score a model on an observation directory.
    Eval(EvalArgs),
    /// Print and check the worked conversion and mapping tables.
    DemoTables,
    /// Run the dataset and training-mode comparison end to end.
    Experiment,
}

#[derive(Debug, Args)]
struct LabelArgs {
    /// Directory written by `gen`.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "alda")]
    dataset: DatasetMode,
    /// Conversion table; defaults to `cct.json` in the input directory.
    #[arg(long)]
    cct: Option<PathBuf>,
    /// Run index recorded in every row.
    #[arg(long, default_value_t = 0)]
    run: u32,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Dataset files written by `label`.
    #[arg(long, required = true, num_args = 1..)]
    data: Vec<PathBuf>,
    #[arg(long)]
    epochs: Option<u32>,
    /// Train federated over this many in-process clients.
    #[arg(long)]
    federated: Option<usize>,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:7878")]
    bind: SocketAddr,
    #[arg(long, default_value_t = 2)]
    clients: usize,
    #[arg(long)]
    rounds: Option<u32>,
    /// Start from this model instead of a fresh initialization.
    #[arg(long)]
    init: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ClientArgs {
    #[arg(long, default_value = "127.0.0.1:7878")]
    connect: SocketAddr,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    id: u32,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    /// Directory written by `gen`.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    mode: Option<InferenceMode>,
    #[arg(long)]
    cct: Option<PathBuf>,
    /// Write per-tick score and confidence tables as CSV.
    #[arg(long)]
    dump_tables: bool,
}

fn config_or_default<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    path.map_or_else(|| Ok(T::default()), io::read_config)
}

fn create_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(file_error(dir))
}

fn write_text(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, text).map_err(file_error(path))
}

fn gen(cli: &Cli) -> Result<()> {
    let mut world: WorldConfig = config_or_default(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        world.seed = s;
    }
    let mut state = generate_scenario(&world)?;
    let obs = state.run();
    io::write_observations(&cli.out, &obs)?;
    io::write_conversion_table(&cli.out.join("cct.json"), state.conversion_table())?;
    io::write_confusion_table(&cli.out.join("confusion.json"), &ConfusionTable::reference())?;
    write_text(&cli.out.join("world.json"), serde_json::to_string_pretty(&world)? + "\n")?;
    println!("{} ticks written to {}", obs.len(), cli.out.display());
    Ok(())
}

fn label(cli: &Cli, args: &LabelArgs) -> Result<()> {
    let cfg: LabelingConfig = config_or_default(cli.config.as_deref())?;
    let obs = io::read_observations(&args.input)?;
    let cct = io::read_conversion_table(&args.cct.clone().unwrap_or_else(|| args.input.join("cct.json")))?;
    let run = label_run(args.run, obs, &cct, &cfg);
    let ds = assemble_dataset(&run, args.dataset);
    create_out(&cli.out)?;
    io::write_dataset(&cli.out.join("dataset.jsonl"), &ds)?;
    let positives = ds.iter().filter(|e| e.is_positive()).count();
    println!(
        "{} rows ({positives} inside, {} outside) written to {}",
        ds.len(),
        ds.len() - positives,
        cli.out.join("dataset.jsonl").display()
    );
    Ok(())
}

fn load_rows(paths: &[PathBuf]) -> Result<Vec<TrainingRow>> {
    let mut rows = Vec::new();
    for p in paths {
        rows.extend(training_rows(&io::read_dataset(p)?));
    }
    if rows.is_empty() {
        return Err(Error::Config("the datasets contain no rows".into()));
    }
    Ok(rows)
}

fn experiment_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg: ExperimentConfig = config_or_default(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.train_seed = s;
    }
    Ok(cfg)
}

fn train(cli: &Cli, args: &TrainArgs) -> Result<()> {
    let cfg = experiment_config(cli)?;
    let rows = load_rows(&args.data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train_seed);
    let init = init_model(&cfg.model, &mut rng)?;
    let mut log = String::from("step,train_loss\n");
    let params = match args.federated {
        None => {
            let mut trainer = Trainer::new(init, cfg.optimizer);
            let mut shuffle = ChaCha8Rng::seed_from_u64(cfg.train_seed.wrapping_add(1));
            for epoch in 1..=args.epochs.unwrap_or(cfg.epochs) {
                let loss = trainer.train_epoch(&rows, &mut shuffle)?;
                log.push_str(&format!("{epoch},{loss:.9}\n"));
            }
            trainer.params
        }
        Some(n) => {
            let mut clients: Vec<ClientState> = partition(&rows, n)
                .into_iter()
                .enumerate()
                .map(|(i, part)| {
                    ClientState::new(i as u32, part, cfg.optimizer, cfg.train_seed.wrapping_add(1 + i as u64))
                })
                .collect();
            let fed = FedConfig { rounds: args.epochs.unwrap_or(cfg.fed.rounds), ..cfg.fed };
            run_federated(&mut clients, init, &fed, |rec, global| {
                let loss = fedmdfnn::mdfnn::evaluate_loss(global, &rows)?;
                log.push_str(&format!("{},{loss:.9}\n", rec.round + 1));
                Ok(())
            })?
        }
    };
    create_out(&cli.out)?;
    save_params(&params, &cli.out.join("model.fmdf"))?;
    write_text(&cli.out.join("train_loss.csv"), log)?;
    println!("model trained on {} rows written to {}", rows.len(), cli.out.join("model.fmdf").display());
    Ok(())
}

fn serve(cli: &Cli, args: &ServeArgs) -> Result<()> {
    let cfg = experiment_config(cli)?;
    let init: ModelParams = match &args.init {
        Some(p) => load_params(p)?,
        None => init_model(&cfg.model, &mut ChaCha8Rng::seed_from_u64(cfg.train_seed))?,
    };
    let fed = FedConfig { rounds: args.rounds.unwrap_or(cfg.fed.rounds), ..cfg.fed };
    let mut server = FedServer::bind(args.bind, init, fed, args.clients)?;
    println!("listening on {}", server.local_addr()?);
    let mut rounds = String::new();
    let result = server.run(|rec, _| {
        println!("round {} clients {:?} digest {}", rec.round, rec.clients, digest_hex(rec.digest));
        rounds.push_str(&serde_json::to_string(rec)?);
        rounds.push('\n');
        Ok(())
    });
    create_out(&cli.out)?;
    write_text(&cli.out.join("transcript.ndjson"), server.transcript().join("\n") + "\n")?;
    write_text(&cli.out.join("rounds.jsonl"), rounds)?;
    let global = result?;
    save_params(&global, &cli.out.join("model.fmdf"))?;
    println!("global model written to {}", cli.out.join("model.fmdf").display());
    Ok(())
}

fn client(cli: &Cli, args: &ClientArgs) -> Result<()> {
    let cfg = experiment_config(cli)?;
    let rows = load_rows(std::slice::from_ref(&args.data))?;
    let seed = cli.seed.unwrap_or(cfg.train_seed.wrapping_add(1 + u64::from(args.id)));
    let mut state = ClientState::new(args.id, rows, cfg.optimizer, seed);
    let timeout = Duration::from_secs_f64(cfg.fed.timeout_secs.max(0.001));
    // Local training of a round happens between frames; the read timeout
    // only bounds how long the server may stay silent.
    let summary = run_client(args.connect, &mut state, cfg.fed.local_epochs, timeout, None)?;
    println!(
        "client {} finished {} rounds, last digest {}",
        args.id,
        summary.rounds,
        summary.last_digest.as_deref().unwrap_or("-")
    );
    Ok(())
}

fn eval(cli: &Cli, args: &EvalArgs) -> Result<()> {
    let mut cfg: InferenceConfig = config_or_default(cli.config.as_deref())?;
    if let Some(m) = args.mode {
        cfg.mode = m;
    }
    let params = load_params(&args.model)?;
    let obs = io::read_observations(&args.input)?;
    let cct = io::read_conversion_table(&args.cct.clone().unwrap_or_else(|| args.input.join("cct.json")))?;
    create_out(&cli.out)?;
    let tables = cli.out.join("tables");
    if args.dump_tables {
        create_out(&tables)?;
    }
    let mut dump_err = None;
    let mut sink = |t: u64, d: &fedmdfnn::mapping::MappingDecision| {
        if let (Some(st), Some(ct)) = (&d.scores, &d.confidence) {
            let r = write_text(&tables.join(format!("score_t{t:05}.csv")), st.to_csv())
                .and_then(|_| write_text(&tables.join(format!("confidence_t{t:05}.csv")), ct.to_csv()));
            if let Err(e) = r {
                dump_err.get_or_insert(e);
            }
        }
    };
    let preds = infer_run(&params, &obs, &cct, &cfg, args.dump_tables.then_some(&mut sink as _))?;
    if let Some(e) = dump_err {
        return Err(e);
    }
    let truth: Vec<_> = obs.iter().map(|o| (o.t, &o.truth_pairs)).collect();
    let report = compute_cr(&preds, &truth)?;
    write_text(&cli.out.join("metrics.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    println!(
        "CR_ic {:.2}  CR_inside {:.2}  CR_outside {:.2}  CR_total {:.2}  ({} senders)",
        100.0 * report.cr_ic,
        100.0 * report.cr_inside,
        100.0 * report.cr_outside,
        100.0 * report.cr_total,
        report.senders()
    );
    Ok(())
}

fn demo_tables() -> Result<()> {
    let cp = derive_char_pairs(&ConfusionTable::reference(), 0.2)?;
    let cct = build_conversion_table(&cp.ordered());
    println!("character pairs: {:?}", cp.ordered());
    println!("conversion table:");
    for (c, k) in cct.entries() {
        println!("  {c} -> #{k}");
    }
    let a = canonicalize_plate("5CRD321", &cct);
    let b = canonicalize_plate("SCRO32I", &cct);
    println!("5CRD321 -> {a}, SCRO32I -> {b}");

    let st = ScoreTable::from_values(vec![vec![0.3, 0.7, 0.1], vec![0.1, 0.83, 0.8], vec![0.62, 0.35, 0.4]])?;
    let ct = build_confidence_table(&st);
    println!("score table:");
    for (i, row) in st.values.iter().enumerate() {
        println!("  e{} {}", i + 1, row.iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>().join(" "));
    }
    println!("confidence table:");
    for (i, row) in ct.values.iter().enumerate() {
        println!("  e{} {}", i + 1, row.iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>().join(" "));
    }
    let mut pairs = greedy_pairs(&st, &ct);
    pairs.sort();
    let rendered =
        format!("{{{}}}", pairs.iter().map(|(r, c)| format!("(e{},v{})", r + 1, c + 1)).collect::<Vec<_>>().join(","));
    println!("{rendered}");
    if a != b || a.to_string() != "#3CR#132#2" || rendered != "{(e1,v2),(e2,v3),(e3,v1)}" {
        return Err(Error::Config("worked examples do not reproduce".into()));
    }
    Ok(())
}

fn experiment(cli: &Cli) -> Result<()> {
    let cfg = experiment_config(cli)?;
    let report = run_experiment(&cfg)?;
    report.write(&cli.out)?;
    print!("{}", report.summary());
    println!("reports written to {}", cli.out.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Gen => gen(cli),
        Command::Label(a) => label(cli, a),
        Command::Train(a) => train(cli, a),
        Command::Serve(a) => serve(cli, a),
        Command::Client(a) => client(cli, a),
        Command::Eval(a) => eval(cli, a),
        Command::DemoTables => demo_tables(),
        Command::Experiment => experiment(cli),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

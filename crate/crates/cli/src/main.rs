mod render;

use std::fs;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};
use tvgo_core::compatibility::sup_ratio_numeric;
use tvgo_core::experiments::{format_full, LemmaCheckConfig};
use tvgo_core::graph::read_active_set;
use tvgo_core::tuning::{t_upper, RhsOptions};
use tvgo_core::*;

use render::to_json;

#[derive(Parser)]
#[command(name = "tvgo", version, about = "Total-variation regularized estimation on graphs")]
struct Cli {
    /// Master seed; TVGO_SEED takes precedence when set.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Write the main artifact here instead of stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
    /// Worker threads (default: available cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Args)]
struct GraphArgs {
    /// family:params, e.g. path:8, cycle:5, grid:3x4, tree:1,1,2
    #[arg(long, conflicts_with = "graph_file")]
    graph: Option<GraphFamily>,
    /// Edge-list file as written by `tvgo graph`.
    #[arg(long)]
    graph_file: Option<PathBuf>,
}

#[derive(Args)]
struct SetArgs {
    /// Active set, 1-indexed rows of D, comma separated.
    #[arg(long = "S", value_delimiter = ',', conflicts_with = "s_file")]
    s: Vec<usize>,
    #[arg(long = "S-file")]
    s_file: Option<PathBuf>,
}

#[derive(Args)]
struct ProbArgs {
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    #[arg(long, default_value_t = 2.0)]
    t: f64,
    #[arg(long, default_value_t = 2.0)]
    x: f64,
    #[arg(long, default_value_t = 2.0)]
    a: f64,
    #[arg(long, default_value_t = 0.5)]
    eta: f64,
}

#[derive(Subcommand)]
enum Command {
    /// Emit a graph as an edge list (or JSON / CSV).
    Graph {
        #[arg(long)]
        family: GraphFamily,
    },
    /// Antiprojection lengths, γ, weights and r_S for (D, S).
    Theory {
        #[command(flatten)]
        graph: GraphArgs,
        #[command(flatten)]
        set: SetArgs,
    },
    /// Closed-form and numeric bounds on √r_S/κ.
    Kappa {
        #[command(flatten)]
        graph: GraphArgs,
        #[command(flatten)]
        set: SetArgs,
        /// Use unit weights instead of the theory weights.
        #[arg(long)]
        identity: bool,
        #[arg(long, default_value_t = 10_000)]
        restarts: usize,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        /// Skip the numeric search.
        #[arg(long)]
        no_numeric: bool,
    },
    /// Fit the plain (--lambda) or square-root (--lambda0) estimator.
    Solve {
        #[command(flatten)]
        graph: GraphArgs,
        /// Observations: one value per line or a CSV with a `y` column.
        #[arg(long)]
        y: PathBuf,
        #[arg(long, conflicts_with = "lambda0", required_unless_present = "lambda0")]
        lambda: Option<f64>,
        #[arg(long)]
        lambda0: Option<f64>,
        #[arg(long)]
        max_iter: Option<usize>,
        #[arg(long)]
        tol: Option<f64>,
        /// Skip the KKT certificate.
        #[arg(long)]
        no_certify: bool,
    },
    /// Tuning parameters, Assumption 1 and caps on admissible sets.
    Tune {
        #[command(flatten)]
        graph: GraphArgs,
        #[command(flatten)]
        set: SetArgs,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long = "r-s")]
        r_s: Option<usize>,
        #[arg(long)]
        gamma: Option<f64>,
        #[command(flatten)]
        prob: ProbArgs,
        #[arg(long)]
        lambda0: Option<f64>,
        /// ‖Df⁰‖₁, needed for the signal part of Assumption 1.
        #[arg(long)]
        tv: Option<f64>,
    },
    /// Right-hand side of an oracle inequality with its term breakdown.
    OracleRhs {
        #[arg(long)]
        theorem: TheoremId,
        #[command(flatten)]
        graph: GraphArgs,
        #[command(flatten)]
        set: SetArgs,
        /// True signal f⁰ (vector file).
        #[arg(long)]
        f0: PathBuf,
        /// Candidate f (default f⁰).
        #[arg(long)]
        f: Option<PathBuf>,
        #[command(flatten)]
        prob: ProbArgs,
        /// paper, numeric, both, or a numeric value of κ
        #[arg(long, default_value = "paper")]
        kappa: String,
        /// λ or λ₀ to use instead of the minimal one.
        #[arg(long)]
        tuning: Option<f64>,
        #[arg(long)]
        grid_constant: Option<f64>,
    },
    /// Monte Carlo experiment from a JSON config; trial CSV to --out.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Write the JSON summary here (default: stdout when --out is set).
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Empirical check of the tail lemmas.
    VerifyProb {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        samples: Option<usize>,
    },
}

#[derive(Debug)]
enum Failure {
    Core(Error),
    Usage(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Core(Error::Io(e))
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Successful run; `converged == false` maps to exit code 3.
struct Done {
    converged: bool,
}

impl Done {
    fn ok() -> Self {
        Self { converged: true }
    }
}

fn kind(e: &Error) -> String {
    let dbg = format!("{e:?}");
    let end = dbg.find(|c: char| !c.is_alphanumeric()).unwrap_or(dbg.len());
    let name = &dbg[..end];
    let mut out = String::new();
    for (i, ch) in name.chars().enumerate() {
        if ch.is_uppercase() && i > 0 {
            out.push('_');
        }
        out.push(ch.to_ascii_lowercase());
    }
    out
}

fn emit_error(kind: &str, message: &str) {
    let line = json!({ "error": kind, "message": message });
    eprintln!("{line}");
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            emit_error("usage", e.to_string().trim());
            return ExitCode::from(2);
        }
    };
    if let Some(threads) = cli.threads {
        if threads == 0 {
            emit_error("usage", "--threads must be positive");
            return ExitCode::from(2);
        }
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    match run(&cli) {
        Ok(done) if done.converged => ExitCode::SUCCESS,
        Ok(_) => {
            emit_error("non_convergence", "solver did not reach its tolerance");
            ExitCode::from(3)
        }
        Err(Failure::Usage(msg)) => {
            emit_error("usage", &msg);
            ExitCode::from(2)
        }
        Err(Failure::Core(e)) => {
            emit_error(&kind(&e), &e.to_string());
            ExitCode::from(2)
        }
    }
}

fn seed(cli: &Cli) -> CliResult<u64> {
    match std::env::var("TVGO_SEED") {
        Ok(v) => v.trim().parse().map_err(|_| Failure::Usage(format!("TVGO_SEED is not an unsigned integer: {v:?}"))),
        Err(_) => Ok(cli.seed.unwrap_or(0)),
    }
}

fn write_out(out: Option<&Path>, text: &str) -> CliResult<()> {
    match out {
        Some(p) => fs::write(p, text)?,
        None => io::stdout().lock().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn load_graph(args: &GraphArgs) -> CliResult<(Option<GraphFamily>, DirectedGraph)> {
    match (&args.graph, &args.graph_file) {
        (Some(f), None) => Ok((Some(f.clone()), build_graph(f)?)),
        (None, Some(p)) => {
            let file = fs::File::open(p)?;
            Ok((None, DirectedGraph::read_from(BufReader::new(file))?))
        }
        _ => Err(Failure::Usage("give exactly one of --graph or --graph-file".into())),
    }
}

fn load_set(args: &SetArgs) -> CliResult<Vec<usize>> {
    match &args.s_file {
        Some(p) => Ok(read_active_set(BufReader::new(fs::File::open(p)?))?),
        None => Ok(args.s.clone()),
    }
}

/// One value per line, or a CSV whose header names a `y` column (otherwise the first column).
fn read_vector(path: &Path) -> CliResult<Vec<f64>> {
    let text = fs::read_to_string(path)?;
    let mut column = 0;
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split([',', '\t', ' ']).filter(|s| !s.is_empty()).collect();
        if out.is_empty() && fields.iter().all(|f| f.parse::<f64>().is_err()) {
            column = fields.iter().position(|f| f.trim_matches('"') == "y").unwrap_or(0);
            continue;
        }
        let field = fields
            .get(column)
            .ok_or_else(|| Error::Parse(format!("{}: line {} has no column {}", path.display(), lineno + 1, column + 1)))?;
        let v: f64 = field
            .parse()
            .map_err(|_| Error::Parse(format!("{}: line {}: not a number: {field:?}", path.display(), lineno + 1)))?;
        out.push(v);
    }
    Ok(out)
}

fn run(cli: &Cli) -> CliResult<Done> {
    let out = cli.out.as_deref();
    match &cli.command {
        Command::Graph { family } => {
            let g = build_graph(family)?;
            let text = match cli.format {
                None => {
                    let mut buf = Vec::new();
                    g.write_to(&mut buf)?;
                    String::from_utf8(buf).expect("ascii")
                }
                Some(Format::Json) => to_json(&json!({ "family": family, "n": g.n(), "m": g.m(), "edges": g.edges() })),
                Some(Format::Csv) => {
                    let mut s = String::from("row,tail,head\n");
                    for (i, (t, h)) in g.edges().iter().enumerate() {
                        s.push_str(&format!("{},{t},{h}\n", i + 1));
                    }
                    s
                }
            };
            write_out(out, &text)?;
            Ok(Done::ok())
        }
        Command::Theory { graph, set } => {
            let (_, g) = load_graph(graph)?;
            let s = active_set(&g, &load_set(set)?)?;
            let report = theory_report(&g.incidence(), &s)?;
            let text = if cli.format == Some(Format::Csv) {
                let mut t = String::from("row,active,omega,weight\n");
                for i in 0..g.m() {
                    t.push_str(&format!(
                        "{},{},{},{}\n",
                        i + 1,
                        u8::from(s.contains_row(i)),
                        format_full(report.omega[i]),
                        format_full(report.weights[i])
                    ));
                }
                t
            } else {
                to_json(&report)
            };
            write_out(out, &text)?;
            Ok(Done::ok())
        }
        Command::Kappa { graph, set, identity, restarts, steps, no_numeric } => {
            let (_, g) = load_graph(graph)?;
            let d = g.incidence();
            let s = active_set(&g, &load_set(set)?)?;
            if !is_admissible(&d, &s) {
                return Err(Error::Inadmissible.into());
            }
            let report = theory_report(&d, &s)?;
            let weights = if *identity { vec![1.0; d.m()] } else { report.weights.clone() };
            let gamma = (!*identity).then_some(report.gamma);
            let n = g.n();
            let closed = if n >= 2 && build_graph(&GraphFamily::Path { n }).map(|p| p.edges() == g.edges()).unwrap_or(false) {
                Some(kappa_bound_path(&s, &weights, gamma))
            } else if n >= 3 && build_graph(&GraphFamily::Cycle { n }).map(|p| p.edges() == g.edges()).unwrap_or(false) {
                Some(kappa_bound_cycle(&s, &weights, gamma))
            } else {
                None
            };
            let closed_json = match closed {
                Some(Ok(b)) => serde_json::to_value(b).expect("serializable"),
                Some(Err(e)) => json!({ "error": e.to_string() }),
                None => json!({ "error": "closed-form bounds exist only for paths and cycles" }),
            };
            let numeric = if *no_numeric || s.size() == 0 {
                Value::Null
            } else {
                let search = KappaSearch { restarts: *restarts, steps: *steps, seed: seed(cli)? };
                let sup = sup_ratio_numeric(&d, &s, &weights, &search)?;
                json!({ "sqrt_rs_over_kappa": sup, "kappa": (s.r_s() as f64).sqrt() / sup, "search": search })
            };
            let body = json!({
                "r_S": s.r_s(),
                "weights": if *identity { "identity" } else { "theory" },
                "closed_form": closed_json,
                "numeric": numeric,
            });
            write_out(out, &to_json(&body))?;
            Ok(Done::ok())
        }
        Command::Solve { graph, y, lambda, lambda0, max_iter, tol, no_certify } => {
            let (_, g) = load_graph(graph)?;
            let d = g.incidence();
            let yv = read_vector(y)?;
            let mut opts = SolverOptions::default();
            if let Some(m) = max_iter {
                opts.max_iter = *m;
            }
            if let Some(t) = tol {
                opts.tol = *t;
            }
            opts.certify = !*no_certify;
            let res = match (lambda, lambda0) {
                (Some(l), None) => solve_analysis(&yv, &d, *l, &opts)?,
                (None, Some(l0)) => solve_sqrt_analysis(&yv, &d, *l0, &opts)?,
                _ => return Err(Failure::Usage("give exactly one of --lambda or --lambda0".into())),
            };
            let text = if cli.format == Some(Format::Csv) {
                let mut t = String::from("vertex,y,f_hat\n");
                for (i, (a, b)) in yv.iter().zip(&res.f_hat).enumerate() {
                    t.push_str(&format!("{},{},{}\n", i + 1, format_full(*a), format_full(*b)));
                }
                t
            } else {
                to_json(&res)
            };
            write_out(out, &text)?;
            Ok(Done { converged: res.converged })
        }
        Command::Tune { graph, set, n, r_s, gamma, prob, lambda0, tv } => {
            let inputs = tune_inputs(graph, set, *n, *r_s, *gamma, prob, *tv)?;
            let mut errors = serde_json::Map::new();
            let mut grab = |name: &str, r: Result<Value>| match r {
                Ok(v) => v,
                Err(e) => {
                    errors.insert(name.to_string(), Value::String(e.to_string()));
                    Value::Null
                }
            };
            let lp = grab("lambda_plain", lambda_plain(&inputs).map(|v| json!(v)));
            let l0_min = lambda0_sqrt(&inputs);
            let l0: std::result::Result<f64, ()> = match (lambda0, &l0_min) {
                (Some(v), _) => Ok(*v),
                (None, Ok(v)) => Ok(*v),
                (None, Err(_)) => Err(()),
            };
            let l0_json = grab("lambda0_sqrt", l0_min.map(|v| json!(v)));
            let r_json = grab("minimal_R", minimal_r(&inputs).map(|v| json!(v)));
            let (a1, caps) = match l0 {
                Ok(l) => (
                    if inputs.norm_df0_1.is_some() {
                        grab("assumption1", check_assumption1(&inputs, l).map(|v| serde_json::to_value(v).expect("serializable")))
                    } else {
                        Value::Null
                    },
                    grab(
                        "set_requirements",
                        admissible_set_requirements(l, inputs.a, inputs.t, inputs.eta, inputs.n)
                            .map(|v| serde_json::to_value(v).expect("serializable")),
                    ),
                ),
                Err(_) => (Value::Null, Value::Null),
            };
            let body = json!({
                "inputs": inputs,
                "lambda_plain": lp,
                "lambda0_sqrt": l0_json,
                "lambda0_used": lambda0.map(|v| json!(v)).unwrap_or(l0_json.clone()),
                "minimal_R": r_json,
                "t_upper": t_upper(inputs.n, inputs.r_s),
                "assumption1": a1,
                "set_requirements": caps,
                "errors": errors,
            });
            write_out(out, &to_json(&body))?;
            Ok(Done::ok())
        }
        Command::OracleRhs { theorem, graph, set, f0, f, prob, kappa, tuning, grid_constant } => {
            let (_, g) = load_graph(graph)?;
            let d = g.incidence();
            let s = active_set(&g, &load_set(set)?)?;
            let f0v = read_vector(f0)?;
            let fv = match f {
                Some(p) => read_vector(p)?,
                None => f0v.clone(),
            };
            if f0v.len() != g.n() {
                return Err(Error::Dimension { expected: g.n(), got: f0v.len() }.into());
            }
            let tv = d.apply(&f0v).iter().map(|v| v.abs()).sum::<f64>();
            let inputs = TuningInputs {
                n: g.n(),
                r_s: s.r_s(),
                gamma: 0.0,
                sigma: prob.sigma,
                t: prob.t,
                x: prob.x,
                a: prob.a,
                eta: prob.eta,
                norm_df0_1: Some(tv),
            };
            let opts = RhsOptions { tuning: *tuning, grid_constant: *grid_constant };
            let search = KappaSearch { seed: seed(cli)?, ..KappaSearch::default() };
            let sources: Vec<(&str, KappaSource)> = match kappa.as_str() {
                "paper" => vec![("paper_bound", KappaSource::PaperBound)],
                "numeric" => vec![("numeric", KappaSource::Numeric(search))],
                "both" => vec![("paper_bound", KappaSource::PaperBound), ("numeric", KappaSource::Numeric(search))],
                other => match other.parse::<f64>() {
                    Ok(v) => vec![("value", KappaSource::Value(v))],
                    Err(_) => return Err(Failure::Usage(format!("--kappa must be paper, numeric, both or a number, got {other:?}"))),
                },
            };
            let mut results = Vec::new();
            for (name, src) in &sources {
                results.push((*name, oracle_rhs(*theorem, &inputs, &fv, &f0v, &d, &s, src, &opts)?));
            }
            let text = if cli.format == Some(Format::Csv) {
                let mut t = String::from("kappa_source,term,value\n");
                for (name, r) in &results {
                    for (k, v) in &r.terms {
                        t.push_str(&format!("{name},{k},{}\n", format_full(*v)));
                    }
                    t.push_str(&format!("{name},bound,{}\n", format_full(r.bound)));
                    t.push_str(&format!("{name},probability,{}\n", format_full(r.probability)));
                }
                t
            } else if results.len() == 1 {
                to_json(&results[0].1)
            } else {
                let map: serde_json::Map<String, Value> =
                    results.iter().map(|(k, r)| (k.to_string(), serde_json::to_value(r).expect("serializable"))).collect();
                to_json(&map)
            };
            write_out(out, &text)?;
            Ok(Done::ok())
        }
        Command::Simulate { config, summary } => {
            let text = fs::read_to_string(config)?;
            let mut cfg: ExperimentConfig = serde_json::from_str(&text).map_err(Error::Json)?;
            if std::env::var("TVGO_SEED").is_ok() || cli.seed.is_some() {
                cfg.seed = seed(cli)?;
            }
            let result = run_experiment(&cfg)?;
            let mut csv = Vec::new();
            write_csv(&result, &mut csv)?;
            let summary_text = to_json(&result.summary);
            match (out, summary) {
                (Some(p), Some(sp)) => {
                    fs::write(p, &csv)?;
                    fs::write(sp, summary_text)?;
                }
                (Some(p), None) => {
                    fs::write(p, &csv)?;
                    write_out(None, &summary_text)?;
                }
                (None, Some(sp)) => {
                    io::stdout().lock().write_all(&csv)?;
                    fs::write(sp, summary_text)?;
                }
                (None, None) => io::stdout().lock().write_all(&csv)?,
            }
            Ok(Done { converged: result.summary.nonconverged == 0 })
        }
        Command::VerifyProb { config, samples } => {
            let mut cfg = match config {
                Some(p) => serde_json::from_str(&fs::read_to_string(p)?).map_err(Error::Json)?,
                None => LemmaCheckConfig::default(),
            };
            if let Some(s) = samples {
                cfg.samples = *s;
            }
            if std::env::var("TVGO_SEED").is_ok() || cli.seed.is_some() {
                cfg.seed = seed(cli)?;
            }
            let summary = verify_probability_lemmas(&cfg)?;
            let text = if cli.format == Some(Format::Csv) {
                let mut t = String::from("lemma,size,level,threshold,empirical,bound,se,pass\n");
                for c in &summary.checks {
                    let lemma = serde_json::to_value(c.lemma).expect("serializable");
                    t.push_str(&format!(
                        "{},{},{},{},{},{},{},{}\n",
                        lemma.as_str().unwrap_or_default(),
                        c.size,
                        format_full(c.level),
                        format_full(c.threshold),
                        format_full(c.empirical),
                        format_full(c.bound),
                        format_full(c.se),
                        u8::from(c.pass)
                    ));
                }
                t
            } else {
                to_json(&summary)
            };
            write_out(out, &text)?;
            Ok(Done::ok())
        }
    }
}

fn tune_inputs(
    graph: &GraphArgs,
    set: &SetArgs,
    n: Option<usize>,
    r_s: Option<usize>,
    gamma: Option<f64>,
    prob: &ProbArgs,
    tv: Option<f64>,
) -> CliResult<TuningInputs> {
    let base = TuningInputs {
        n: 0,
        r_s: 0,
        gamma: 0.0,
        sigma: prob.sigma,
        t: prob.t,
        x: prob.x,
        a: prob.a,
        eta: prob.eta,
        norm_df0_1: tv,
    };
    if graph.graph.is_some() || graph.graph_file.is_some() {
        let (_, g) = load_graph(graph)?;
        let s = active_set(&g, &load_set(set)?)?;
        let report = theory_report(&g.incidence(), &s)?;
        return Ok(TuningInputs { n: g.n(), r_s: s.r_s(), gamma: gamma.unwrap_or(report.gamma), ..base });
    }
    match (n, r_s, gamma) {
        (Some(n), Some(r), Some(g)) => Ok(TuningInputs { n, r_s: r, gamma: g, ..base }),
        _ => Err(Failure::Usage("tune needs --graph/--graph-file with --S, or all of --n, --r-s and --gamma".into())),
    }
}

use std::fs;
use std::path::{Path, PathBuf};

use graphflow::encoder::{DenseIndex, EncoderConfig};
use graphflow::kg::{load_graph_with, load_queries, load_queries_standalone, Graph, QuerySet, Traversal};
use graphflow::mdp::{RewardSpec, DEFAULT_DEPTH_CUTOFF};
use graphflow::metrics::{evaluate_with_jobs, Bins, EvalConfig};
use graphflow::model::{HiddenSpec, Model};
use graphflow::objectives::Objective;
use graphflow::oracle::{distribution_distance, enumerate_trajectories, exact_flows, frequencies, DEFAULT_BUDGET};
use graphflow::sampler::{load_results, save_results, RankedNode, RetrievalResult, Retriever, SampleRecord, SamplerConfig};
use graphflow::synth::{fixture_by_name, generate, Fixture, SynthConfig};
use graphflow::trainer::{check_gradients, prepare, query_seeds, train, TrainConfig};
use graphflow::Error;
use serde_json::json;

use crate::args::{
    BaselineArgs, Cli, Command, DataArgs, EvalArgs, GenArgs, GradcheckArgs, OnOff, OracleArgs, RetrieveArgs,
    TrainArgs, TraversalArg,
};
use crate::manifest::RunManifest;
use crate::{CliError, CliResult};

pub const SEED_ENV: &str = "FLOWGRAPH_SEED";

struct Context {
    seed: Option<u64>,
    env_seed: Option<u64>,
    config: Vec<(String, String)>,
    manifest: Option<PathBuf>,
}

impl Context {
    /// Seed for commands that have no config-file seed of their own.
    fn seed(&self) -> u64 {
        self.seed.or(self.env_seed).unwrap_or(0)
    }
}

fn parse_config(path: &Path) -> CliResult<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: n + 1,
            message: format!("expected key=value, got {line:?}"),
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn env_seed() -> CliResult<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Usage(format!("{SEED_ENV} must be an unsigned integer, got {v:?}"))),
        Err(_) => Ok(None),
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> CliResult<T> {
    v.trim()
        .parse()
        .map_err(|_| CliError::Usage(format!("invalid value for {key}: {v:?}")))
}

pub fn run(cli: Cli) -> CliResult<()> {
    let ctx = Context {
        seed: cli.seed,
        env_seed: env_seed()?,
        config: match &cli.config {
            Some(p) => parse_config(p)?,
            None => Vec::new(),
        },
        manifest: cli.manifest.clone(),
    };
    let mut m = RunManifest::start(command_name(&cli.command), ctx.seed.or(ctx.env_seed));
    if let Some(p) = &cli.config {
        m.input("config", p);
    }
    match &cli.command {
        Command::Gen(a) => gen(&ctx, a, &mut m)?,
        Command::Train(a) => train_cmd(&ctx, a, &mut m)?,
        Command::Retrieve(a) => retrieve(&ctx, a, &mut m)?,
        Command::Eval(a) => eval(&ctx, a, &mut m)?,
        Command::Oracle(a) => oracle(&ctx, a, &mut m)?,
        Command::Gradcheck(a) => {
            let failed = gradcheck(&ctx, a, &mut m)?;
            m.finish(ctx.manifest.as_ref())?;
            return match failed {
                Some(msg) => Err(CliError::CheckFailed(msg)),
                None => Ok(()),
            };
        }
        Command::BaselineDense(a) => baseline(&ctx, a, &mut m)?,
    }
    m.finish(ctx.manifest.as_ref())
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Gen(_) => "gen",
        Command::Train(_) => "train",
        Command::Retrieve(_) => "retrieve",
        Command::Eval(_) => "eval",
        Command::Oracle(_) => "oracle",
        Command::Gradcheck(_) => "gradcheck",
        Command::BaselineDense(_) => "baseline-dense",
    }
}

struct Data {
    graph: Graph,
    queries: QuerySet,
    fixture: Option<Fixture>,
}

fn load_data(a: &DataArgs, m: &mut RunManifest) -> CliResult<Data> {
    if let Some(name) = &a.fixture {
        let f = fixture_by_name(name)?;
        m.config([("fixture".to_string(), name.clone())]);
        return Ok(Data {
            graph: f.graph.clone(),
            queries: f.queries.clone(),
            fixture: Some(f),
        });
    }
    let (Some(g), Some(q)) = (&a.graph, &a.queries) else {
        return Err(CliError::Usage("either --fixture or both --graph and --queries are required".into()));
    };
    let traversal = match a.traversal {
        TraversalArg::Bidirectional => Traversal::Bidirectional,
        TraversalArg::Directed => Traversal::Directed,
    };
    let graph = load_graph_with(g, traversal)?;
    let queries = load_queries(q, &graph)?;
    m.input("graph", g);
    m.input("queries", q);
    Ok(Data {
        graph,
        queries,
        fixture: None,
    })
}

/// Applies config-file entries, then explicit flags, through `set`.
fn apply<F>(ctx: &Context, overrides: &[(&str, &Option<String>)], mut set: F) -> CliResult<()>
where
    F: FnMut(&str, &str) -> CliResult<()>,
{
    for (k, v) in &ctx.config {
        set(k, v)?;
    }
    if let Some(s) = ctx.seed {
        set("seed", &s.to_string())?;
    }
    for (k, v) in overrides {
        if let Some(v) = v {
            set(k, v)?;
        }
    }
    Ok(())
}

fn gen_fixture(name: &str, out: &Path, m: &mut RunManifest) -> CliResult<()> {
    let f = fixture_by_name(name)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    f.graph.save(out.join("graph.jsonl"))?;
    f.queries.save(out.join("queries.jsonl"))?;
    let seed = f.graph.resolve(&f.seed)?;
    let tree = enumerate_trajectories(&f.graph, f.query(), seed, f.depth_cutoff, &f.reward, DEFAULT_BUDGET)?;
    let dump = exact_flows(tree)?.dump(&f.graph);
    dump.save(out.join("oracle.json"))?;
    for file in ["graph.jsonl", "queries.jsonl", "oracle.json"] {
        m.output(file, &out.join(file));
    }
    m.config([
        ("fixture".to_string(), name.to_string()),
        ("traversal".to_string(), format!("{:?}", f.graph.traversal()).to_lowercase()),
        ("depth_cutoff".to_string(), f.depth_cutoff.to_string()),
        ("seed_node".to_string(), f.seed.clone()),
    ]);
    m.summary = json!({ "z": dump.z, "trajectories": dump.trajectories.len() });
    Ok(())
}

fn gen(ctx: &Context, a: &GenArgs, m: &mut RunManifest) -> CliResult<()> {
    if let Some(name) = &a.fixture {
        return gen_fixture(name, &a.out, m);
    }
    let mut cfg = SynthConfig::default();
    if let Some(s) = ctx.env_seed {
        cfg.seed = s;
    }
    apply(ctx, &a.overrides(), |k, v| Ok(cfg.set(k, v)?))?;
    let out = generate(&cfg)?;
    out.write_to(&a.out)?;
    m.config(serde_json::from_value::<std::collections::BTreeMap<String, serde_json::Value>>(
        serde_json::to_value(&cfg).map_err(Error::from)?,
    )
    .map_err(Error::from)?
    .into_iter()
    .map(|(k, v)| (k, v.to_string())));
    for name in ["graph.jsonl", "queries.jsonl", "manifest.json"] {
        m.output(name, &a.out.join(name));
    }
    let mut bins = [0usize; 4];
    out.manifest.queries.iter().for_each(|q| bins[q.bin - 1] += 1);
    m.summary = json!({ "nodes": out.manifest.nodes, "edges": out.manifest.edges, "queries": out.manifest.queries.len(), "per_bin": bins });
    Ok(())
}

fn train_config(ctx: &Context, a: &TrainArgs, fixture: Option<&Fixture>) -> CliResult<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(f) = fixture {
        cfg.depth_cutoff = f.depth_cutoff;
        cfg.reward = f.reward.clone();
    }
    if let Some(s) = ctx.env_seed {
        cfg.seed = s;
        cfg.init_seed = s;
    }
    for (k, v) in &ctx.config {
        cfg.set(k, v)?;
    }
    if let Some(s) = ctx.seed {
        cfg.seed = s;
        cfg.init_seed = s;
    }
    for (k, v) in a.overrides() {
        if let Some(v) = v {
            cfg.set(k, v)?;
        }
    }
    Ok(cfg)
}

fn train_cmd(ctx: &Context, a: &TrainArgs, m: &mut RunManifest) -> CliResult<()> {
    let data = load_data(&a.data, m)?;
    let cfg = train_config(ctx, a, data.fixture.as_ref())?;
    let outcome = train(&data.graph, &data.queries, &cfg)?;
    outcome.model.save(&a.out, &outcome.meta)?;
    let log = a
        .log
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.log.csv", a.out.display())));
    outcome.log.save(&log)?;
    m.config(cfg.to_kv());
    m.output("checkpoint", &a.out);
    m.output("log", &log);
    m.summary = json!({
        "steps": outcome.steps,
        "final_train_loss": outcome.final_train_loss,
        "converged": outcome.converged,
        "config_digest": outcome.meta.config_digest,
        "coverage": outcome.coverage,
    });
    eprintln!(
        "trained {} for {} steps; final train loss {:.6e}",
        cfg.objective, outcome.steps, outcome.final_train_loss
    );
    Ok(())
}

fn retrieve(ctx: &Context, a: &RetrieveArgs, m: &mut RunManifest) -> CliResult<()> {
    let data = load_data(&a.data, m)?;
    let (model, meta) = Model::load(&a.model)?;
    m.input("model", &a.model);
    let trained = TrainConfig::from_map(&meta.train_config)?;
    let mut cfg = SamplerConfig {
        depth_cutoff: trained.depth_cutoff,
        seed: ctx.env_seed.unwrap_or(0),
        ..Default::default()
    };
    let mut jobs = 1usize;
    let rerank = a.rerank.map(|r| (r == OnOff::On).to_string());
    let overrides = [
        ("n", &a.n),
        ("depth_cutoff", &a.depth_cutoff),
        ("temperature", &a.temperature),
        ("jobs", &a.jobs),
        ("rerank", &rerank),
    ];
    apply(ctx, &overrides, |k, v| {
        match k {
            "n" => cfg.n = parse(k, v)?,
            "depth_cutoff" => cfg.depth_cutoff = parse(k, v)?,
            "temperature" => cfg.temperature = parse(k, v)?,
            "seed" => cfg.seed = parse(k, v)?,
            "jobs" => jobs = parse(k, v)?,
            "rerank" => {
                cfg.rerank = match v {
                    "on" | "true" => true,
                    "off" | "false" => false,
                    _ => return Err(CliError::Usage(format!("rerank must be on or off, got {v:?}"))),
                }
            }
            other => return Err(CliError::Usage(format!("unknown retrieve key {other}"))),
        }
        Ok(())
    })?;
    if !(cfg.temperature > 0.0) {
        return Err(CliError::Usage("temperature must be positive".into()));
    }
    let retriever = Retriever::new(&model, &data.graph, cfg.clone())?;
    let results = retriever.retrieve_all(&data.queries, jobs)?;
    save_results(&results, &a.out)?;
    m.config([
        ("n".to_string(), cfg.n.to_string()),
        ("depth_cutoff".to_string(), cfg.depth_cutoff.to_string()),
        ("temperature".to_string(), cfg.temperature.to_string()),
        ("seed".to_string(), cfg.seed.to_string()),
        ("rerank".to_string(), cfg.rerank.to_string()),
        ("jobs".to_string(), jobs.to_string()),
    ]);
    m.output("results", &a.out);
    m.summary = json!({ "queries": results.len() });
    Ok(())
}

fn eval(ctx: &Context, a: &EvalArgs, m: &mut RunManifest) -> CliResult<()> {
    let queries = load_queries_standalone(&a.queries)?;
    let results = load_results(&a.results)?;
    m.input("queries", &a.queries);
    m.input("results", &a.results);
    let mut cfg = EvalConfig::default();
    let mut jobs = 1usize;
    let overrides = [("bins", &a.bins), ("recall_k", &a.recall_k), ("jobs", &a.jobs)];
    apply(ctx, &overrides, |k, v| {
        match k {
            "bins" => {
                let lower = v.split(',').map(|b| parse(k, b)).collect::<CliResult<Vec<usize>>>()?;
                cfg.bins = Bins::new(lower)?;
            }
            "recall_k" => cfg.recall_k = parse(k, v)?,
            "jobs" => jobs = parse(k, v)?,
            "seed" => {}
            other => return Err(CliError::Usage(format!("unknown eval key {other}"))),
        }
        Ok(())
    })?;
    let report = evaluate_with_jobs(&results, &queries, &cfg, jobs)?;
    report.save(&a.out, a.json.as_deref())?;
    m.output("report", &a.out);
    if let Some(j) = &a.json {
        m.output("report_json", j);
    }
    m.config([
        (
            "bins".to_string(),
            cfg.bins.lower.iter().map(|b| b.to_string()).collect::<Vec<_>>().join(","),
        ),
        ("recall_k".to_string(), cfg.recall_k.to_string()),
    ]);
    m.summary = serde_json::to_value(&report.overall).map_err(Error::from)?;
    eprint!("{}", report.to_csv());
    Ok(())
}

fn reward_from_table(v: &str) -> CliResult<RewardSpec> {
    let mut cfg = TrainConfig::default();
    cfg.set("reward_table", v)?;
    cfg.reward.validate()?;
    Ok(cfg.reward)
}

fn oracle(ctx: &Context, a: &OracleArgs, m: &mut RunManifest) -> CliResult<()> {
    let data = load_data(&a.data, m)?;
    let mut depth_cutoff = data.fixture.as_ref().map_or(DEFAULT_DEPTH_CUTOFF, |f| f.depth_cutoff);
    let mut reward = data.fixture.as_ref().map_or(RewardSpec::Binary, |f| f.reward.clone());
    let mut budget = DEFAULT_BUDGET;
    let overrides = [
        ("depth_cutoff", &a.depth_cutoff),
        ("reward_table", &a.reward_table),
        ("budget", &a.budget),
    ];
    apply(ctx, &overrides, |k, v| {
        match k {
            "depth_cutoff" => depth_cutoff = parse(k, v)?,
            "reward_table" => reward = reward_from_table(v)?,
            "budget" => budget = parse(k, v)?,
            "seed" => {}
            other => return Err(CliError::Usage(format!("unknown oracle key {other}"))),
        }
        Ok(())
    })?;
    let query = match &a.qid {
        Some(q) => data
            .queries
            .get(q)
            .ok_or_else(|| Error::QidMismatch(format!("no query {q}")))?,
        None => data
            .queries
            .iter()
            .next()
            .ok_or_else(|| CliError::Usage("query set is empty".into()))?,
    };
    let seed = match &data.fixture {
        Some(f) => data.graph.resolve(&f.seed)?,
        None => {
            let single = QuerySet::standalone(vec![query.clone()])?;
            query_seeds(&data.graph, &single, &EncoderConfig::default())?[0]
        }
    };
    let tree = enumerate_trajectories(&data.graph, query, seed, depth_cutoff, &reward, budget)?;
    let table = exact_flows(tree)?;
    let dump = table.dump(&data.graph);
    dump.save(&a.out)?;
    m.output("dump", &a.out);
    m.config([
        ("qid".to_string(), query.qid.clone()),
        ("depth_cutoff".to_string(), depth_cutoff.to_string()),
        ("budget".to_string(), budget.to_string()),
    ]);
    let mut summary = json!({
        "states": table.tree.len(),
        "z": dump.z,
        "max_conservation_residual": dump.max_conservation_residual,
    });
    if let Some(path) = &a.results {
        m.input("results", path);
        let results = load_results(path)?;
        let r = results
            .iter()
            .find(|r| r.qid == query.qid)
            .ok_or_else(|| Error::QidMismatch(format!("results contain no query {}", query.qid)))?;
        if r.samples.is_empty() {
            return Err(CliError::Usage(format!("result for {} has no samples", query.qid)));
        }
        let d = distribution_distance(&frequencies(&r.sample_terminals()), &dump.terminal_distribution)?;
        summary["total_variation"] = json!(d.total_variation);
        summary["l1"] = json!(d.l1);
        eprintln!("total variation to the exact terminal law: {:.6}", d.total_variation);
    }
    m.summary = summary;
    Ok(())
}

/// Returns a failure message when some objective exceeds the tolerance.
fn gradcheck(ctx: &Context, a: &GradcheckArgs, m: &mut RunManifest) -> CliResult<Option<String>> {
    let f = fixture_by_name(&a.fixture)?;
    let objectives: Vec<Objective> = if a.objective == "all" {
        Objective::ALL.to_vec()
    } else {
        vec![a.objective.parse()?]
    };
    let seed = ctx.seed();
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for objective in objectives {
        let mut cfg = TrainConfig {
            objective,
            depth_cutoff: f.depth_cutoff,
            reward: f.reward.clone(),
            eval_ratio: 1.0,
            seed,
            init_seed: seed,
            encoder: EncoderConfig::default().with_dim(64),
            hidden: HiddenSpec {
                layers: vec![16],
                ..Default::default()
            },
            ..Default::default()
        };
        let overrides = [("dim", &a.dim), ("hidden", &a.hidden)];
        apply(ctx, &overrides, |k, v| Ok(cfg.set(k, v)?))?;
        let data = prepare(&f.graph, &f.queries, &cfg)?;
        let r = check_gradients(&data, &cfg, a.h, a.samples, seed)?;
        eprintln!(
            "{:<6} max rel err {:.3e} over {} parameters",
            objective.name(),
            r.max_rel_err,
            r.checked
        );
        if !(r.max_rel_err <= a.tol) {
            failures.push(format!("{} ({:.3e})", objective.name(), r.max_rel_err));
        }
        rows.push(json!({ "objective": objective.name(), "max_rel_err": r.max_rel_err, "worst_param": r.worst_param, "checked": r.checked }));
    }
    m.config([
        ("fixture".to_string(), a.fixture.clone()),
        ("h".to_string(), a.h.to_string()),
        ("samples".to_string(), a.samples.to_string()),
        ("tol".to_string(), a.tol.to_string()),
    ]);
    m.summary = json!({ "checks": rows, "passed": failures.is_empty() });
    Ok((!failures.is_empty()).then(|| format!("relative error above {} for {}", a.tol, failures.join(", "))))
}

fn baseline(ctx: &Context, a: &BaselineArgs, m: &mut RunManifest) -> CliResult<()> {
    let data = load_data(&a.data, m)?;
    let mut enc = TrainConfig::default();
    let mut k = 20usize;
    let overrides = [
        ("k", &a.k),
        ("dim", &a.dim),
        ("ngram_orders", &a.ngram_orders),
        ("doc_cutoff", &a.doc_cutoff),
        ("hash_seed", &a.hash_seed),
    ];
    apply(ctx, &overrides, |key, v| {
        match key {
            "k" => k = parse(key, v)?,
            "seed" => {}
            _ => enc.set(key, v)?,
        }
        Ok(())
    })?;
    if k == 0 {
        return Err(CliError::Usage("k must be >= 1".into()));
    }
    enc.encoder.validate()?;
    let index = DenseIndex::build(&data.graph, &enc.encoder);
    let mut results = Vec::with_capacity(data.queries.len());
    for q in data.queries.iter() {
        let ranked = index.rank_all(&data.graph, &q.text)?;
        let top: Vec<(String, f64)> = ranked
            .into_iter()
            .take(k)
            .map(|(n, s)| (data.graph.id(n).to_string(), s))
            .collect();
        results.push(RetrievalResult {
            qid: q.qid.clone(),
            samples: top
                .iter()
                .map(|(id, _)| SampleRecord {
                    path: vec![id.clone()],
                    terminal: id.clone(),
                })
                .collect(),
            ranked: top
                .into_iter()
                .map(|(node_id, score)| RankedNode {
                    node_id,
                    score,
                    count: 1,
                })
                .collect(),
            rerank_applied: false,
        });
    }
    save_results(&results, &a.out)?;
    m.output("results", &a.out);
    m.config([
        ("k".to_string(), k.to_string()),
        ("dim".to_string(), enc.encoder.dim.to_string()),
    ]);
    m.summary = json!({ "queries": results.len() });
    Ok(())
}

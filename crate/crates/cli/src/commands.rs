use std::collections::HashMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use faultloc_core::bundle::parse_external_scores;
use faultloc_core::evalbench::{
    bundle_mock_backend, ground_truth_to_json, load_corpus, parse_ground_truth, render_cells, BackendFactory, TOP_N,
};
use faultloc_core::llm::remote::ENV_API_KEY;
use faultloc_core::synthetic::{generate, write_corpus, SyntheticOptions};
use faultloc_core::{
    ochiai, preview_plan, run_experiment, top_n, ChatBackend, FaultBundle, MockBackend, MockScript,
    OrderStrategy, PipelineConfig, PromptLibrary, RankedList, RankingFile, RemoteBackend,
};
use rayon::prelude::*;
use serde::Serialize;

use crate::output::write_atomic;
use crate::{
    BackendFlags, BackendKind, EvaluateArgs, ExperimentArgs, Failure, Format, InspectArgs, LocalizeArgs,
    PipelineFlags, Preset, SynthArgs,
};

type CmdResult = Result<(), Failure>;

fn read(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(Failure::input)
}

fn load_config_file(path: &Path) -> Result<PipelineConfig, Failure> {
    toml::from_str(&read(path)?)
        .with_context(|| format!("parsing config {}", path.display()))
        .map_err(Failure::input)
}

/// Config file first, then flags on top; validated together with the prompts.
pub fn build_config(flags: &PipelineFlags) -> Result<(PipelineConfig, PromptLibrary), Failure> {
    let mut config = match &flags.config {
        Some(path) => load_config_file(path)?,
        None => PipelineConfig::default(),
    };
    if flags.no_navigation {
        config.enable_navigation = false;
    }
    if flags.no_division {
        config.enable_division = false;
    }
    if flags.no_reflexion {
        config.enable_reflexion = false;
    }
    if let Some(order) = flags.order {
        config.order_strategy = order;
    }
    if let Some(limit) = flags.token_limit {
        config.budget.limit = limit;
    }
    if let Some(n) = flags.reflexion_iters {
        config.reflexion_max_iters = n;
    }
    if let Some(n) = flags.max_tool_calls {
        config.max_tool_calls = n;
    }
    let prompts = match &flags.prompts {
        Some(dir) => PromptLibrary::default()
            .load_dir(dir)
            .with_context(|| format!("loading prompts from {}", dir.display()))
            .map_err(Failure::input)?,
        None => PromptLibrary::default(),
    };
    config.validate().map_err(Failure::input)?;
    prompts.check(&config.prompts).map_err(Failure::input)?;
    Ok((config, prompts))
}

fn load_bundle(dir: &Path, external_scores: Option<&PathBuf>) -> Result<FaultBundle, Failure> {
    let mut bundle = FaultBundle::load(dir).map_err(Failure::input)?;
    if let Some(path) = external_scores {
        let scores = parse_external_scores(&read(path)?)
            .map_err(|e| Failure::input(anyhow!("{}: {e}", path.display())))?;
        bundle.external_scores = Some(scores);
    }
    Ok(bundle)
}

fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool, Failure> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(Failure::pipeline)
}

fn backend_factory(flags: &BackendFlags) -> Result<Box<BackendFactory<'static>>, Failure> {
    match flags.backend {
        BackendKind::Remote => {
            if std::env::var(ENV_API_KEY).map_or(true, |k| k.trim().is_empty()) {
                return Err(Failure::input(anyhow!("--backend remote needs {ENV_API_KEY} in the environment")));
            }
            Ok(Box::new(|_: &FaultBundle| Ok(Box::new(RemoteBackend::from_env()) as Box<dyn ChatBackend>)))
        }
        BackendKind::Mock => match &flags.mock_script {
            Some(path) => {
                let script = MockScript::from_json(&read(path)?)
                    .with_context(|| format!("parsing mock script {}", path.display()))
                    .map_err(Failure::input)?;
                MockBackend::new(script.clone()).map_err(Failure::input)?;
                Ok(Box::new(move |_: &FaultBundle| {
                    MockBackend::new(script.clone())
                        .map(|b| Box::new(b) as Box<dyn ChatBackend>)
                        .map_err(|e| e.to_string())
                }))
            }
            None => Ok(Box::new(bundle_mock_backend)),
        },
    }
}

pub fn localize(args: &LocalizeArgs) -> CmdResult {
    let (config, prompts) = build_config(&args.pipeline)?;
    let bundles = args
        .bundle
        .iter()
        .map(|dir| load_bundle(dir, args.external_scores.as_ref()))
        .collect::<Result<Vec<_>, _>>()?;
    let factory = backend_factory(&args.backend)?;
    let pool = thread_pool(args.backend.jobs)?;

    let results: Vec<_> = pool.install(|| {
        bundles
            .par_iter()
            .map(|bundle| {
                let backend = factory(bundle).map_err(|e| Failure::input(anyhow!("{}: {e}", bundle.fault_id)))?;
                faultloc_core::localize(bundle, &config, &prompts, backend.as_ref()).map_err(|e| {
                    let code = if e.is_input_error() { crate::EXIT_INPUT } else { crate::EXIT_PIPELINE };
                    Failure { code, error: e.into() }
                })
            })
            .collect()
    });

    let single = bundles.len() == 1;
    let mut failures = Vec::new();
    for (bundle, result) in bundles.iter().zip(results) {
        let result = match result {
            Ok(r) => r,
            Err(failure) if single => return Err(failure),
            Err(failure) => {
                eprintln!("error: {:#}", failure.error);
                failures.push(failure);
                continue;
            }
        };
        for warning in &result.warnings {
            log::warn!("{}: {warning}", bundle.fault_id);
        }
        let dir = if single { args.out.clone() } else { args.out.join(&bundle.fault_id) };
        let file = result.ranking_file(&config);
        let text = file.to_json();
        write_atomic(&dir.join("ranking.json"), &text).map_err(Failure::pipeline)?;
        for transcript in &result.transcripts {
            write_atomic(&dir.join("transcripts").join(format!("{}.json", transcript.agent)), &transcript.to_json())
                .map_err(Failure::pipeline)?;
        }
        match args.format {
            Format::Json => print!("{text}"),
            Format::Text => {
                println!("{} ({}, {} ms)", bundle.fault_id, config.label(), result.elapsed_ms);
                print!("{}", result.final_ranking.render());
                println!("wrote {}", dir.join("ranking.json").display());
            }
        }
    }
    match failures.len() {
        0 => Ok(()),
        n => {
            // Pipeline trouble outranks bad input when both occur.
            let code = failures.iter().map(|f| f.code).min().unwrap_or(crate::EXIT_PIPELINE);
            Err(Failure {
                code,
                error: anyhow!("{n} of {} bundle(s) failed", bundles.len()),
            })
        }
    }
}

/// Ranking files directly in `dir` plus `dir/*/ranking.json`, sorted by path.
fn ranking_paths(dir: &Path) -> Result<Vec<PathBuf>, Failure> {
    let entries = std::fs::read_dir(dir)
        .with_context(|| format!("reading rankings directory {}", dir.display()))
        .map_err(Failure::input)?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry.map_err(Failure::input)?.path();
        if path.is_dir() {
            let nested = path.join("ranking.json");
            if nested.is_file() {
                paths.push(nested);
            }
        } else if path.extension().is_some_and(|e| e == "json") {
            paths.push(path);
        }
    }
    paths.sort();
    Ok(paths)
}

pub fn evaluate(args: &EvaluateArgs) -> CmdResult {
    let truth = parse_ground_truth(&read(&args.truth)?)
        .map_err(|e| Failure::input(anyhow!("{}: {e}", args.truth.display())))?;
    let paths = ranking_paths(&args.rankings)?;
    if paths.is_empty() {
        log::warn!("no ranking files in {}; every fault counts as a miss", args.rankings.display());
    }
    let mut rankings: HashMap<String, RankedList> = HashMap::new();
    for path in &paths {
        let file = RankingFile::from_json(&read(path)?).map_err(|e| Failure::input(anyhow!("{}: {e}", path.display())))?;
        let list = file.ranked_list().map_err(|e| Failure::input(anyhow!("{}: {e}", path.display())))?;
        if rankings.insert(file.fault_id.clone(), list).is_some() {
            return Err(Failure::input(anyhow!("{}: fault {} ranked twice", path.display(), file.fault_id)));
        }
    }
    let report = top_n(&rankings, &truth);
    let mut json = serde_json::to_string_pretty(&report).map_err(Failure::pipeline)?;
    json.push('\n');
    if let Some(out) = &args.out {
        write_atomic(out, &json).map_err(Failure::pipeline)?;
    }
    match args.format {
        Format::Json => print!("{json}"),
        Format::Text => {
            let header = std::iter::once(String::new()).chain(TOP_N.iter().map(|n| format!("Top-{n}")));
            let row = std::iter::once(format!("{} faults", report.fault_count()))
                .chain(TOP_N.iter().map(|&n| report.count(n).to_string()));
            print!("{}", render_cells(&[header.collect(), row.collect()]));
            if !report.missing.is_empty() {
                println!("no ranking for: {}", report.missing.join(", "));
            }
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct Inspection<'a> {
    fault_id: &'a str,
    tests: usize,
    failing_tests: usize,
    covered_methods: usize,
    graph_methods: usize,
    graph_edges: usize,
    ochiai_top: Vec<faultloc_core::SuspiciousnessScore>,
    order_strategy: OrderStrategy,
    order: Vec<String>,
    effective_token_limit: usize,
    plan: faultloc_core::DivisionPlan,
}

pub fn inspect(args: &InspectArgs) -> CmdResult {
    let (config, prompts) = build_config(&args.pipeline)?;
    let bundle = load_bundle(&args.bundle, args.external_scores.as_ref())?;
    let (order, plan) = preview_plan(&bundle, &config, &prompts).map_err(Failure::input)?;
    let scores = ochiai(&bundle.coverage);
    let inspection = Inspection {
        fault_id: &bundle.fault_id,
        tests: bundle.coverage.tests().len(),
        failing_tests: bundle.coverage.fail_count(),
        covered_methods: bundle.coverage.entries().len(),
        graph_methods: bundle.graph.len(),
        graph_edges: bundle.graph.edge_count(),
        ochiai_top: scores.into_iter().take(args.top).collect(),
        order_strategy: config.order_strategy,
        order: order.iter().map(ToString::to_string).collect(),
        effective_token_limit: config.effective_budget().limit,
        plan,
    };
    match args.format {
        Format::Json => println!("{}", serde_json::to_string_pretty(&inspection).map_err(Failure::pipeline)?),
        Format::Text => print!("{}", render_inspection(&inspection, args.top)),
    }
    Ok(())
}

fn render_inspection(i: &Inspection<'_>, top: usize) -> String {
    use std::fmt::Write;
    let mut out = String::new();
    let _ = writeln!(out, "fault {}", i.fault_id);
    let _ = writeln!(
        out,
        "tests {} ({} failing), covered methods {}, graph {} methods / {} edges",
        i.tests, i.failing_tests, i.covered_methods, i.graph_methods, i.graph_edges
    );
    let _ = writeln!(out, "\nochiai top {top}");
    let mut cells = vec![["rank", "score", "e_f", "e_p", "method"].map(String::from).to_vec()];
    for (r, s) in i.ochiai_top.iter().enumerate() {
        cells.push(vec![
            (r + 1).to_string(),
            format!("{:.4}", s.score),
            s.e_f.to_string(),
            s.e_p.to_string(),
            s.method.to_string(),
        ]);
    }
    out.push_str(&render_cells(&cells));
    let _ = writeln!(out, "\norder ({})", i.order_strategy);
    for (r, m) in i.order.iter().take(top).enumerate() {
        let _ = writeln!(out, "{:>4}. {m}", r + 1);
    }
    let _ = writeln!(out, "\ndivision under {} tokens: {}", i.effective_token_limit, i.plan);
    out.trim_end().to_string() + "\n"
}

fn preset_configs(base: &PipelineConfig, preset: Preset) -> Vec<PipelineConfig> {
    match preset {
        Preset::Ablation => vec![
            base.clone(),
            PipelineConfig { enable_navigation: false, ..base.clone() },
            PipelineConfig { enable_division: false, ..base.clone() },
            PipelineConfig { enable_reflexion: false, ..base.clone() },
        ],
        Preset::Ordering => [OrderStrategy::Execution, OrderStrategy::Ochiai, OrderStrategy::External]
            .into_iter()
            .map(|order_strategy| PipelineConfig { order_strategy, ..base.clone() })
            .collect(),
    }
}

pub fn experiment(args: &ExperimentArgs) -> CmdResult {
    let (base, prompts) = build_config(&args.pipeline)?;
    let configs = if args.run_configs.is_empty() {
        preset_configs(&base, args.preset)
    } else {
        let mut configs = Vec::new();
        for path in &args.run_configs {
            let config = load_config_file(path)?;
            config.validate().map_err(|e| Failure::input(anyhow!("{}: {e}", path.display())))?;
            prompts.check(&config.prompts).map_err(Failure::input)?;
            configs.push(config);
        }
        configs
    };
    let (bundles, truth) = load_corpus(&args.corpus).map_err(Failure::input)?;
    let factory = backend_factory(&args.backend)?;
    let pool = thread_pool(args.backend.jobs)?;
    let table = pool.install(|| run_experiment(&bundles, &truth, &configs, &prompts, factory.as_ref()));

    let json = table.to_json();
    if let Some(out) = &args.out {
        write_atomic(out, &json).map_err(Failure::pipeline)?;
    }
    match args.format {
        Format::Json => print!("{json}"),
        Format::Text => print!("{}", table.render()),
    }
    let failed: usize = table.rows.iter().map(|r| r.failures.len()).sum();
    for row in &table.rows {
        for (fault, error) in &row.failures {
            eprintln!("{}: {fault}: {error}", row.label);
        }
    }
    if failed > 0 {
        return Err(Failure::pipeline(anyhow!("{failed} fault run(s) failed")));
    }
    Ok(())
}

pub fn synth(args: &SynthArgs) -> CmdResult {
    if args.methods < 4 || args.faults == 0 {
        return Err(Failure::input(anyhow!("synth needs at least 1 fault and 4 methods per fault")));
    }
    let faults = generate(&SyntheticOptions {
        faults: args.faults,
        methods: args.methods,
        seed: args.seed,
        degrade_undivided: args.degrade_undivided,
        ..Default::default()
    });
    write_corpus(&faults, &args.out).map_err(Failure::pipeline)?;
    let truth: Vec<_> = faults.iter().map(|f| f.truth.clone()).collect();
    debug_assert_eq!(parse_ground_truth(&ground_truth_to_json(&truth)).as_ref(), Ok(&truth));
    println!("wrote {} synthetic faults to {}", faults.len(), args.out.display());
    Ok(())
}

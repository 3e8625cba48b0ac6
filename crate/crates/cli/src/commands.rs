//! Subcommand bodies. Each resolves its settings, registers inputs and
//! outputs, stops after printing the plan in dry-run mode, then runs.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::json;

use qcompare_client::ReviewClient;
use qcompare_core::assembler::{assemble, fits_context, DatasetStats, InterleaveFormat, SubsetStats, TokenBudget, TokenCounter, WhitespaceCounter};
use qcompare_core::chat::{CachedClient, ChatClient, RetryPolicy, RetryingClient};
use qcompare_core::corpus::{load_descriptions, load_groups, load_items, load_manifest, read_jsonl, save_groups, save_items, write_jsonl, ImageGroup};
use qcompare_core::distill::{generate_qa_batch, merge_batch, qa_to_mcq, teach_general_batch, DEFAULT_ASPECTS};
use qcompare_core::evalkit::{aggregate_judge, judge_responses, random_baseline, run_mcq, score_mcq, BenchDefinition, JudgeCase, McqRecord, Split};
use qcompare_core::grouper::{sample_groups, SamplingSpec};
use qcompare_core::prefagg::{fit_map_scores, pearson, run_2afc, swap_consistency, weighted_average, FitOptions, PreferenceMatrix};
use qcompare_core::review::ReviewPayload;
use qcompare_core::simfilter::{calibrate_threshold, filter_groups, CachedProvider, EmbedOptions};

use crate::registry::{build_client, build_provider, check_client, check_provider};
use crate::{
    usage, AssembleArgs, BudgetArgs, ClientOpts, CombineArgs, Command, CreateBatchArgs, CrossexamArgs, Ctx, EvalCommand, FilterArgs,
    JudgeArgs, McqArgs, MergeArgs, ReportArgs, ReviewCommand, SampleArgs, ServeArgs, ServiceOpts, StatsArgs, TeachCommand,
    TeachGeneralArgs, TeachQaArgs, TwoAfcArgs,
};

const DEFAULT_SERVICE: &str = "http://127.0.0.1:8080";

pub fn run(command: Command, mut ctx: Ctx<'_>) -> Result<()> {
    let name = match &command {
        Command::Sample(_) => "sample",
        Command::Filter(_) => "filter",
        Command::Merge(_) => "merge",
        Command::Teach(TeachCommand::General(_)) => "teach general",
        Command::Teach(TeachCommand::Qa(_)) => "teach qa",
        Command::Assemble(_) => "assemble",
        Command::Eval(EvalCommand::Mcq(_)) => "eval mcq",
        Command::Eval(EvalCommand::Judge(_)) => "eval judge",
        Command::Eval(EvalCommand::TwoAfc(_)) => "eval 2afc",
        Command::Eval(EvalCommand::Combine(_)) => "eval combine",
        Command::ReviewServe(_) => "review-serve",
        Command::Review(ReviewCommand::CreateBatch(_)) => "review create-batch",
        Command::Review(ReviewCommand::Report(_)) => "review report",
        Command::Review(ReviewCommand::Crossexam(_)) => "review crossexam",
        Command::Review(ReviewCommand::Pending(_)) => "review pending",
        Command::Stats(_) => "stats",
        Command::Budget(_) => "budget",
    };
    ctx.command = name.to_string();
    match command {
        Command::Sample(a) => sample(a, &mut ctx),
        Command::Filter(a) => filter(a, &mut ctx),
        Command::Merge(a) => merge(a, &mut ctx),
        Command::Teach(TeachCommand::General(a)) => teach_general(a, &mut ctx),
        Command::Teach(TeachCommand::Qa(a)) => teach_qa(a, &mut ctx),
        Command::Assemble(a) => assemble_cmd(a, &mut ctx),
        Command::Eval(EvalCommand::Mcq(a)) => eval_mcq(a, &mut ctx),
        Command::Eval(EvalCommand::Judge(a)) => eval_judge(a, &mut ctx),
        Command::Eval(EvalCommand::TwoAfc(a)) => eval_2afc(a, &mut ctx),
        Command::Eval(EvalCommand::Combine(a)) => eval_combine(a, &mut ctx),
        Command::ReviewServe(a) => review_serve(a, &mut ctx),
        Command::Review(ReviewCommand::CreateBatch(a)) => review_create_batch(a, &mut ctx),
        Command::Review(ReviewCommand::Report(a)) => review_report(a, &mut ctx),
        Command::Review(ReviewCommand::Crossexam(a)) => review_crossexam(a, &mut ctx),
        Command::Review(ReviewCommand::Pending(a)) => review_pending(a, &mut ctx),
        Command::Stats(a) => stats(a, &mut ctx),
        Command::Budget(a) => budget(a, &mut ctx),
    }
}

fn as_usage(e: anyhow::Error) -> anyhow::Error {
    usage(format!("{e:#}"))
}

fn get<T: FromStr + Display>(ctx: &mut Ctx, key: &str, flag: Option<T>, default: T) -> Result<T>
where
    T::Err: Display,
{
    ctx.settings.get(key, flag, default).map_err(as_usage)
}

fn opt<T: FromStr + Display>(ctx: &mut Ctx, key: &str, flag: Option<T>) -> Result<Option<T>>
where
    T::Err: Display,
{
    ctx.settings.get_opt(key, flag).map_err(as_usage)
}

fn req<T: FromStr + Display>(ctx: &mut Ctx, key: &str, flag: Option<T>) -> Result<T>
where
    T::Err: Display,
{
    ctx.settings.require(key, flag).map_err(as_usage)
}

fn path_str(p: Option<PathBuf>) -> Option<String> {
    p.map(|p| p.display().to_string())
}

fn req_path(ctx: &mut Ctx, key: &str, flag: Option<PathBuf>) -> Result<PathBuf> {
    req::<String>(ctx, key, path_str(flag)).map(PathBuf::from)
}

fn opt_path(ctx: &mut Ctx, key: &str, flag: Option<PathBuf>) -> Result<Option<PathBuf>> {
    Ok(opt::<String>(ctx, key, path_str(flag))?.map(PathBuf::from))
}

fn parse_fmt(ctx: &mut Ctx, flag: Option<String>) -> Result<InterleaveFormat> {
    let raw = get(ctx, "fmt", flag, InterleaveFormat::OrdinalLabel.as_str().to_string())?;
    raw.parse().map_err(|e| usage(format!("fmt: {e}")))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn finish<T: Serialize>(ctx: &mut Ctx, summary: &T) -> Result<()> {
    ctx.write_manifest()?;
    ctx.emit(summary)
}

/// Resolved chat-client settings; building happens after the plan.
struct ClientPlan {
    name: String,
    in_flight: usize,
    cache: Option<PathBuf>,
    attempts: usize,
    max_images: usize,
}

fn client_plan(ctx: &mut Ctx, key: &str, o: ClientOpts) -> Result<ClientPlan> {
    let name: String = req(ctx, key, o.client)?;
    check_client(&name).map_err(as_usage)?;
    let in_flight = get(ctx, "in_flight", o.in_flight, 8usize)?;
    let cache = opt_path(ctx, "cache", o.cache)?;
    let retries = get(ctx, "retries", o.retries, 2usize)?;
    let max_images = get(ctx, "max_images", o.max_images, 4usize)?;
    Ok(ClientPlan {
        name,
        in_flight,
        cache,
        attempts: retries + 1,
        max_images,
    })
}

impl ClientPlan {
    fn policy(&self) -> RetryPolicy {
        RetryPolicy {
            attempts: self.attempts,
            base_delay: Duration::from_millis(500),
        }
    }

    fn cached<C: ChatClient>(&self, inner: C) -> Result<CachedClient<C>> {
        Ok(match &self.cache {
            Some(p) => CachedClient::persistent(inner, p)?,
            None => CachedClient::new(inner),
        })
    }

    /// Cache outside, retries inside: a cached answer never retries.
    fn build(&self) -> Result<Box<dyn ChatClient>> {
        let base = build_client(&self.name, self.max_images)?;
        Ok(Box::new(self.cached(RetryingClient::new(base, self.policy()))?))
    }

    /// Without the retry layer, for callers that retry on their own terms.
    fn build_plain(&self) -> Result<Box<dyn ChatClient>> {
        let base = build_client(&self.name, self.max_images)?;
        Ok(Box::new(self.cached(base)?))
    }
}

fn sample(a: SampleArgs, ctx: &mut Ctx) -> Result<()> {
    let input = req_path(ctx, "in", a.input)?;
    let out = req_path(ctx, "out", a.out)?;
    let spec = SamplingSpec {
        n_pairs: get(ctx, "pairs", a.pairs, 0)?,
        n_triples: get(ctx, "triples", a.triples, 0)?,
        n_quads: get(ctx, "quads", a.quads, 0)?,
        seed: get(ctx, "seed", a.seed, 0)?,
    };
    ctx.input(&input);
    ctx.output(&out);
    if ctx.plan()? {
        return Ok(());
    }
    let images = load_manifest(&input)?;
    let set = sample_groups(&images, spec)?;
    save_groups(&set.groups, &out)?;
    let summary = json!({
        "groups": set.groups.len(),
        "pairs": set.count_of_size(2),
        "triples": set.count_of_size(3),
        "quads": set.count_of_size(4),
        "out": out,
    });
    finish(ctx, &summary)
}

#[derive(Serialize)]
struct FilterSummary {
    tau: f64,
    target_retention: Option<f64>,
    kept: usize,
    removed: usize,
    retention_by_size: BTreeMap<usize, f64>,
    provider_calls: usize,
    cache_hits: usize,
}

fn filter(a: FilterArgs, ctx: &mut Ctx) -> Result<()> {
    let input = req_path(ctx, "in", a.input)?;
    let descs_path = req_path(ctx, "descs", a.descs)?;
    let out = req_path(ctx, "out", a.out)?;
    let removed = req_path(ctx, "removed", a.removed)?;
    let tau: Option<f64> = opt(ctx, "tau", a.tau)?;
    let target: Option<f64> = opt(ctx, "target_retention", a.target_retention)?;
    match (tau, target) {
        (Some(_), Some(_)) => return Err(usage("set either tau or target_retention, not both")),
        (None, None) => return Err(usage("one of tau or target_retention is required")),
        _ => {}
    }
    let provider_name: String = get(ctx, "provider", a.provider, "hashbag".to_string())?;
    check_provider(&provider_name).map_err(as_usage)?;
    let dim = get(ctx, "embed_dim", a.embed_dim, 256usize)?;
    let opts = EmbedOptions {
        batch_size: get(ctx, "batch_size", a.batch_size, 64)?,
        in_flight: get(ctx, "in_flight", a.in_flight, 4)?,
    };
    let embed_cache = opt_path(ctx, "embed_cache", a.embed_cache)?;
    let report = opt_path(ctx, "report", a.report)?;
    ctx.input(&input);
    ctx.input(&descs_path);
    ctx.output(&out);
    ctx.output(&removed);
    if let Some(r) = &report {
        ctx.output(r);
    }
    if ctx.plan()? {
        return Ok(());
    }

    let groups = load_groups(&input)?;
    let descs = load_descriptions(&descs_path)?.text_by_id();
    let provider = CachedProvider::new(build_provider(&provider_name, dim)?);
    if let Some(c) = embed_cache.as_deref().filter(|c| c.exists()) {
        provider.load(c)?;
    }
    let tau = match (tau, target) {
        (Some(t), _) => t,
        (None, Some(r)) => calibrate_threshold(&groups, &descs, &provider, r, opts)?,
        (None, None) => unreachable!("checked above"),
    };
    let result = filter_groups(&groups, &descs, &provider, tau, opts)?;
    save_groups(&result.kept, &out)?;
    save_groups(&result.removed, &removed)?;
    if let Some(c) = &embed_cache {
        provider.save(c)?;
    }
    let summary = FilterSummary {
        tau: result.tau,
        target_retention: target,
        kept: result.kept.len(),
        removed: result.removed.len(),
        retention_by_size: result.retention_by_size,
        provider_calls: provider.provider_calls(),
        cache_hits: provider.cache_hits(),
    };
    if let Some(r) = &report {
        write_json(r, &summary)?;
    }
    finish(ctx, &summary)
}

fn merge(a: MergeArgs, ctx: &mut Ctx) -> Result<()> {
    let plan = client_plan(ctx, "client", a.client)?;
    let input = req_path(ctx, "in", a.input)?;
    let descs_path = req_path(ctx, "descs", a.descs)?;
    let out = req_path(ctx, "out", a.out)?;
    ctx.input(&input);
    ctx.input(&descs_path);
    ctx.output(&out);
    if ctx.plan()? {
        return Ok(());
    }
    let groups = load_groups(&input)?;
    let descs = load_descriptions(&descs_path)?.text_by_id();
    let client = plan.build()?;
    let (items, stats) = merge_batch(&client, &groups, &descs, plan.in_flight);
    save_items(&items, &out)?;
    finish(ctx, &json!({"items": items.len(), "stats": stats}))
}

fn teach_general(a: TeachGeneralArgs, ctx: &mut Ctx) -> Result<()> {
    let plan = client_plan(ctx, "client", a.client)?;
    let input = req_path(ctx, "in", a.input)?;
    let out = req_path(ctx, "out", a.out)?;
    ctx.input(&input);
    ctx.output(&out);
    if ctx.plan()? {
        return Ok(());
    }
    let groups = load_groups(&input)?;
    let client = plan.build()?;
    let (items, stats) = teach_general_batch(&client, &groups, plan.in_flight);
    save_items(&items, &out)?;
    finish(ctx, &json!({"items": items.len(), "stats": stats}))
}

fn teach_qa(a: TeachQaArgs, ctx: &mut Ctx) -> Result<()> {
    let plan = client_plan(ctx, "client", a.client)?;
    let input = req_path(ctx, "in", a.input)?;
    let out = req_path(ctx, "out", a.out)?;
    let aspects: String = get(ctx, "aspects", a.aspects, DEFAULT_ASPECTS.join(", "))?;
    let aspects: Vec<&str> = aspects.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if aspects.is_empty() {
        return Err(usage("aspects must name at least one aspect"));
    }
    let seed = get(ctx, "seed", a.seed, 0u64)?;
    let qa_out = opt_path(ctx, "qa_out", a.qa_out)?;
    ctx.input(&input);
    ctx.output(&out);
    if let Some(q) = &qa_out {
        ctx.output(q);
    }
    if ctx.plan()? {
        return Ok(());
    }
    let groups = load_groups(&input)?;
    let client = plan.build()?;
    let batch = generate_qa_batch(&client, &groups, &aspects, plan.in_flight);
    let mut items = Vec::with_capacity(batch.items.len() * 2);
    for qa in &batch.items {
        let (mcq, direct) = qa_to_mcq(qa, seed);
        items.push(mcq);
        items.push(direct);
    }
    save_items(&items, &out)?;
    if let Some(q) = &qa_out {
        write_jsonl(q, &batch.items)?;
    }
    let summary = json!({
        "qa_records": batch.items.len(),
        "items": items.len(),
        "dropped_records": batch.dropped_records,
        "stats": batch.stats,
    });
    finish(ctx, &summary)
}

fn subset_specs(ctx: &mut Ctx, flags: Vec<String>) -> Result<Vec<(String, PathBuf)>> {
    let joined = (!flags.is_empty()).then(|| flags.join(","));
    let raw: String = req(ctx, "subset", joined)?;
    let mut seen = HashSet::new();
    let mut specs = Vec::new();
    for part in raw.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (name, path) = part
            .split_once('=')
            .filter(|(n, p)| !n.trim().is_empty() && !p.trim().is_empty())
            .ok_or_else(|| usage(format!("subset `{part}`: expected name=path")))?;
        if !seen.insert(name.trim().to_string()) {
            return Err(usage(format!("subset `{}` given twice", name.trim())));
        }
        specs.push((name.trim().to_string(), PathBuf::from(path.trim())));
    }
    if specs.is_empty() {
        return Err(usage("at least one subset is required"));
    }
    Ok(specs)
}

fn assemble_cmd(a: AssembleArgs, ctx: &mut Ctx) -> Result<()> {
    let fmt = parse_fmt(ctx, a.fmt)?;
    let specs = subset_specs(ctx, a.subsets)?;
    let out = req_path(ctx, "out", a.out)?;
    let stats_path = opt_path(ctx, "stats", a.stats)?;
    for (_, p) in &specs {
        ctx.input(p);
    }
    ctx.output(&out);
    if let Some(s) = &stats_path {
        ctx.output(s);
    }
    if ctx.plan()? {
        return Ok(());
    }
    let subsets = specs
        .into_iter()
        .map(|(name, p)| Ok((name, load_items(&p)?)))
        .collect::<Result<Vec<_>>>()?;
    let stats = assemble(&subsets, fmt, &out)?;
    if let Some(s) = &stats_path {
        write_json(s, &stats)?;
    }
    finish(ctx, &stats)
}

fn stats(a: StatsArgs, ctx: &mut Ctx) -> Result<()> {
    let specs = subset_specs(ctx, a.subsets)?;
    let out = opt_path(ctx, "out", a.out)?;
    for (_, p) in &specs {
        ctx.input(p);
    }
    if let Some(o) = &out {
        ctx.output(o);
    }
    if ctx.plan()? {
        return Ok(());
    }
    let mut stats = DatasetStats::default();
    for (name, p) in specs {
        let s = SubsetStats::from_items(&load_items(&p)?);
        stats.all.merge(&s);
        stats.subsets.insert(name, s);
    }
    if let Some(o) = &out {
        write_json(o, &stats)?;
    }
    finish(ctx, &stats)
}

fn budget(a: BudgetArgs, ctx: &mut Ctx) -> Result<()> {
    let tokens_per_image = req(ctx, "tokens_per_image", a.tokens_per_image)?;
    let context_window = req(ctx, "context_window", a.context_window)?;
    let n_images = req(ctx, "images", a.images)?;
    let text: Option<String> = opt(ctx, "text", a.text)?;
    let text_tokens = match (text, a.text_tokens) {
        (Some(_), Some(_)) => return Err(usage("set either text or text_tokens, not both")),
        (Some(t), None) => WhitespaceCounter.count(&t),
        (None, flag) => get(ctx, "text_tokens", flag, 0usize)?,
    };
    if ctx.plan()? {
        return Ok(());
    }
    let b = TokenBudget {
        tokens_per_image,
        context_window,
        text_tokens,
        n_images,
    };
    ctx.emit(&json!({
        "needed": n_images * tokens_per_image + text_tokens,
        "budget": b,
        "fit": fits_context(&b),
    }))
}

fn eval_mcq(a: McqArgs, ctx: &mut Ctx) -> Result<()> {
    let plan = client_plan(ctx, "client", a.client)?;
    let bench_path = req_path(ctx, "bench", a.bench)?;
    let stem = bench_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let bench_name: String = get(ctx, "bench_name", a.bench_name, stem)?;
    let keys = opt_path(ctx, "keys", a.keys)?;
    let split: String = get(ctx, "split", a.split, "test".to_string())?;
    let split: Split = split.parse().map_err(|e| usage(format!("split: {e}")))?;
    let fmt = parse_fmt(ctx, a.fmt)?;
    let report = req_path(ctx, "report", a.report)?;
    let responses_out = opt_path(ctx, "responses_out", a.responses_out)?;
    ctx.input(&bench_path);
    if let Some(k) = &keys {
        ctx.input(k);
    }
    ctx.output(&report);
    if let Some(r) = &responses_out {
        ctx.output(r);
    }
    if ctx.plan()? {
        return Ok(());
    }
    let bench = BenchDefinition::load(&bench_name, &bench_path, keys.as_deref())?;
    let client = plan.build()?;
    let responses = run_mcq(&client, &bench, fmt, split, plan.in_flight)?;
    let accuracy = score_mcq(&responses, &bench, split)?;
    if let Some(r) = &responses_out {
        write_jsonl(r, &responses)?;
    }
    let body = json!({
        "bench": bench.name,
        "split": split.to_string(),
        "client": plan.name,
        "fmt": fmt.as_str(),
        "random_baseline": random_baseline(&bench, split)?,
        "accuracy": accuracy,
    });
    write_json(&report, &body)?;
    finish(ctx, &body)
}

#[derive(Deserialize)]
struct GoldenRecord {
    id: String,
    question: String,
    golden: String,
}

#[derive(Deserialize)]
struct CandidateRecord {
    id: String,
    response: Option<String>,
}

fn eval_judge(a: JudgeArgs, ctx: &mut Ctx) -> Result<()> {
    let golden_path = req_path(ctx, "golden", a.golden)?;
    let responses_path = req_path(ctx, "responses", a.responses)?;
    let plan = client_plan(
        ctx,
        "judge",
        ClientOpts {
            client: a.judge,
            in_flight: a.in_flight,
            cache: a.cache,
            retries: a.retries,
            max_images: None,
        },
    )?;
    let report = req_path(ctx, "report", a.report)?;
    let scores_out = opt_path(ctx, "scores_out", a.scores_out)?;
    ctx.input(&golden_path);
    ctx.input(&responses_path);
    ctx.output(&report);
    if let Some(s) = &scores_out {
        ctx.output(s);
    }
    if ctx.plan()? {
        return Ok(());
    }
    let goldens: Vec<GoldenRecord> = read_jsonl(&golden_path)?;
    let mut candidates: HashMap<String, String> = HashMap::new();
    for c in read_jsonl::<CandidateRecord>(&responses_path)? {
        if candidates.insert(c.id.clone(), c.response.unwrap_or_default()).is_some() {
            bail!("duplicate response id `{}`", c.id);
        }
    }
    let known: HashSet<&str> = goldens.iter().map(|g| g.id.as_str()).collect();
    if let Some(stray) = candidates.keys().find(|id| !known.contains(id.as_str())) {
        bail!("response id `{stray}` has no golden answer");
    }
    let missing = goldens.iter().filter(|g| !candidates.contains_key(&g.id)).count();
    let cases: Vec<JudgeCase> = goldens
        .into_iter()
        .map(|g| JudgeCase {
            candidate: candidates.remove(&g.id).unwrap_or_default(),
            id: g.id,
            question: g.question,
            golden: g.golden,
        })
        .collect();
    let judge = plan.build_plain()?;
    let outcomes = judge_responses(&judge, &cases, plan.policy(), plan.in_flight);
    let scores: Vec<_> = outcomes.iter().map(|o| o.scores).collect();
    let aggregate = aggregate_judge(&scores)?;
    if let Some(s) = &scores_out {
        write_jsonl(s, &outcomes)?;
    }
    let body = json!({
        "judge": plan.name,
        "cases": cases.len(),
        "missing_responses": missing,
        "flagged": outcomes.iter().filter(|o| o.flagged).count(),
        "aggregate": aggregate,
    });
    write_json(&report, &body)?;
    finish(ctx, &body)
}

#[derive(Deserialize)]
struct MosRecord {
    image_id: String,
    mos: f64,
}

fn eval_2afc(a: TwoAfcArgs, ctx: &mut Ctx) -> Result<()> {
    let plan = client_plan(ctx, "client", a.client)?;
    let pairs_path = req_path(ctx, "pairs", a.pairs)?;
    let mos_path = opt_path(ctx, "mos", a.mos)?;
    let prior_variance = get(ctx, "prior_var", a.prior_variance, FitOptions::default().prior_variance)?;
    let fmt = parse_fmt(ctx, a.fmt)?;
    let report = req_path(ctx, "report", a.report)?;
    let records_out = opt_path(ctx, "records_out", a.records_out)?;
    ctx.input(&pairs_path);
    if let Some(m) = &mos_path {
        ctx.input(m);
    }
    ctx.output(&report);
    if let Some(r) = &records_out {
        ctx.output(r);
    }
    if ctx.plan()? {
        return Ok(());
    }
    let groups: Vec<ImageGroup> = load_groups(&pairs_path)?;
    let mut pairs = Vec::with_capacity(groups.len());
    for g in &groups {
        match g.members() {
            [x, y] => pairs.push((x.clone(), y.clone())),
            _ => bail!("group `{}` has {} images; 2afc needs pairs", g.group_id(), g.len()),
        }
    }
    let client = plan.build()?;
    let records = run_2afc(&client, &pairs, fmt, plan.in_flight)?;
    let consistency = swap_consistency(&records)?;
    let mut ids: Vec<String> = Vec::new();
    let mut seen = HashSet::new();
    for (x, y) in &pairs {
        for id in [&x.id, &y.id] {
            if seen.insert(id.clone()) {
                ids.push(id.clone());
            }
        }
    }
    let matrix = PreferenceMatrix::from_records(ids, &records)?;
    let fitted = fit_map_scores(
        &matrix,
        FitOptions {
            prior_variance,
            ..FitOptions::default()
        },
    )?;
    let scores = fitted.by_id();
    // a constant score vector (e.g. a purely positional client) leaves the
    // correlation undefined; that is reported, not fatal
    let (rho, rho_error, n_mos) = match &mos_path {
        Some(p) => {
            let mos: HashMap<String, f64> = read_jsonl::<MosRecord>(p)?.into_iter().map(|r| (r.image_id, r.mos)).collect();
            let (xs, ys): (Vec<f64>, Vec<f64>) = scores.iter().filter_map(|(id, s)| mos.get(id).map(|m| (*s, *m))).unzip();
            match pearson(&xs, &ys) {
                Ok(r) => (Some(r), None, xs.len()),
                Err(e) => (None, Some(e.to_string()), xs.len()),
            }
        }
        None => (None, None, 0),
    };
    if let Some(r) = &records_out {
        write_jsonl(r, &records)?;
    }
    let body = json!({
        "client": plan.name,
        "n_pairs": pairs.len(),
        "n_records": records.len(),
        "n_flagged": records.iter().filter(|r| r.flagged).count(),
        "swap_consistency": consistency,
        "prior_variance": prior_variance,
        "iterations": fitted.iterations,
        "log_posterior": fitted.log_posterior,
        "scores": scores,
        "pearson": rho,
        "pearson_error": rho_error,
        "n_mos": n_mos,
    });
    write_json(&report, &body)?;
    finish(ctx, &body)
}

fn eval_combine(a: CombineArgs, ctx: &mut Ctx) -> Result<()> {
    let metric: String = get(ctx, "metric", a.metric, "chance_corrected".to_string())?;
    let pointer = match metric.as_str() {
        "pearson" => "/pearson",
        "chance_corrected" => "/swap_consistency/chance_corrected",
        "raw" => "/swap_consistency/raw",
        other => return Err(usage(format!("unknown metric `{other}`; expected pearson, chance_corrected or raw"))),
    };
    let out = opt_path(ctx, "out", a.out)?;
    for r in &a.reports {
        ctx.input(r);
    }
    if let Some(o) = &out {
        ctx.output(o);
    }
    if ctx.plan()? {
        return Ok(());
    }
    let mut values = BTreeMap::new();
    let mut weights = BTreeMap::new();
    for r in &a.reports {
        let text = std::fs::read_to_string(r).with_context(|| format!("reading {}", r.display()))?;
        let v: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", r.display()))?;
        let key = r.display().to_string();
        let value = v
            .pointer(pointer)
            .and_then(|x| x.as_f64())
            .ok_or_else(|| anyhow!("{key}: no numeric `{metric}`"))?;
        let n = v
            .get("n_pairs")
            .and_then(|x| x.as_f64())
            .ok_or_else(|| anyhow!("{key}: no `n_pairs`"))?;
        values.insert(key.clone(), value);
        weights.insert(key, n);
    }
    let avg = weighted_average(&values, &weights)?;
    let body = json!({"metric": metric, "weighted_average": avg, "values": values, "weights": weights});
    if let Some(o) = &out {
        write_json(o, &body)?;
    }
    finish(ctx, &body)
}

fn review_serve(a: ServeArgs, ctx: &mut Ctx) -> Result<()> {
    let dir = req_path(ctx, "review_dir", a.review_dir)?;
    let bind: String = get(ctx, "bind", a.bind, "127.0.0.1:8080".to_string())?;
    if ctx.plan()? {
        return Ok(());
    }
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(&bind).await.with_context(|| format!("binding {bind}"))?;
        ctx.emit(&json!({"listening": listener.local_addr()?.to_string(), "dir": dir}))?;
        ctx.out.flush()?;
        qcompare_service::serve(listener, &dir, qcompare_service::ctrl_c()).await?;
        Ok(())
    })
}

fn service_client(ctx: &mut Ctx, o: ServiceOpts) -> Result<ReviewClient> {
    let url: String = get(ctx, "service_url", o.service_url, DEFAULT_SERVICE.to_string())?;
    Ok(ReviewClient::new(url))
}

fn block_on<F: std::future::Future>(f: F) -> Result<F::Output> {
    Ok(tokio::runtime::Builder::new_current_thread().enable_all().build()?.block_on(f))
}

fn review_create_batch(a: CreateBatchArgs, ctx: &mut Ctx) -> Result<()> {
    let client = service_client(ctx, a.service)?;
    let batch: String = req(ctx, "batch", a.batch)?;
    let kept_path = req_path(ctx, "kept", a.kept)?;
    let removed_path = req_path(ctx, "removed", a.removed)?;
    let descs_path = req_path(ctx, "descs", a.descs)?;
    let k = get(ctx, "k", a.k, 250usize)?;
    let seed = get(ctx, "seed", a.seed, 0u64)?;
    ctx.input(&kept_path);
    ctx.input(&removed_path);
    ctx.input(&descs_path);
    if ctx.plan()? {
        return Ok(());
    }
    let descs = load_descriptions(&descs_path)?.text_by_id();
    let payloads = |p: &Path| -> Result<Vec<ReviewPayload>> {
        Ok(load_items(p)?.iter().map(|i| ReviewPayload::from_item(i, &descs)).collect())
    };
    let kept = payloads(&kept_path)?;
    let removed = payloads(&removed_path)?;
    let created = block_on(client.create_batch(&batch, &kept, &removed, k, seed))??;
    ctx.emit(&json!({"batch": batch, "created": created}))
}

fn review_report(a: ReportArgs, ctx: &mut Ctx) -> Result<()> {
    let client = service_client(ctx, a.service)?;
    let batch: String = req(ctx, "batch", a.batch)?;
    if ctx.plan()? {
        return Ok(());
    }
    let report = block_on(client.report(&batch))??;
    ctx.emit(&report)
}

fn review_crossexam(a: CrossexamArgs, ctx: &mut Ctx) -> Result<()> {
    let client = service_client(ctx, a.service)?;
    let bench = req_path(ctx, "bench", a.bench)?;
    ctx.input(&bench);
    if ctx.plan()? {
        return Ok(());
    }
    let records: Vec<McqRecord> = read_jsonl(&bench)?;
    let created = block_on(client.create_crossexam(&records))??;
    ctx.emit(&json!({"created": created}))
}

fn review_pending(a: ServiceOpts, ctx: &mut Ctx) -> Result<()> {
    let client = service_client(ctx, a)?;
    if ctx.plan()? {
        return Ok(());
    }
    let pending = block_on(client.pending())??;
    ctx.emit(&pending)
}

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use ctevidence_core::agent::{Agent, AgentError, RunConfig, DEFAULT_QUERY};
use ctevidence_core::eval::{
    evaluate_cohort, k_sweep, oversegmentation_flag, sensitivity_report, CaseInput, CohortResult,
    GoldLabels, LabelClassifier, Lexicon, LexiconClassifier, MetricsBundle, RemoteClassifier,
};
use ctevidence_core::llm::{ChatBackend, HttpBackend, ScriptedBackend};
use ctevidence_core::pathology::LUNG_PATHOLOGIES;
use ctevidence_core::radiomics::{
    absolute_volume, estimate_midplanes, resolve_structure, run_tool, FeatureVector, ToolRegistry,
};
use ctevidence_core::retrieval::{Index, ReferenceEntry};
use ctevidence_core::snippets::{
    extract_snippets, template_f1_verify, ExtractedSnippet, ExtractionPromptSet,
};
use ctevidence_core::volume::{load_study, make_phantom, save_study, PhantomSpec, StudyBundle};
use ctevidence_core::Execution;
use serde::{Deserialize, Serialize};

use crate::config::{load_config, BackendConfig, ConfigError, PipelineConfig};
use crate::manifest::{sha256_hex, RunManifest};
use crate::{
    runtime, AgentCmd, Cli, CliError, CohortArgs, Command, EvalCmd, FeaturesCmd, IndexCmd,
    PhantomCmd, SnippetsCmd,
};

type Result<T> = std::result::Result<T, CliError>;

struct Ctx<'a> {
    config: PipelineConfig,
    digest: Option<String>,
    out: &'a mut dyn Write,
}

pub(crate) fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let (config, digest) = match &cli.config {
        Some(p) => {
            let c = load_config(p)?;
            let d = c.digest();
            (c, Some(d))
        }
        None => (PipelineConfig::default(), None),
    };
    let mut ctx = Ctx {
        config,
        digest,
        out,
    };
    match cli.command {
        Command::Phantom(PhantomCmd::Make { spec, out }) => phantom_make(&mut ctx, &spec, &out),
        Command::Features(FeaturesCmd::Extract { study, out }) => {
            features_extract(&mut ctx, &study, &out)
        }
        Command::Index(IndexCmd::Build {
            snippets,
            features_root,
            out,
        }) => index_build(&mut ctx, &snippets, &features_root, &out),
        Command::Index(IndexCmd::Query {
            index,
            features,
            k,
            out,
        }) => index_query(&mut ctx, index.as_deref(), &features, k, &out),
        Command::Snippets(SnippetsCmd::Extract {
            reports,
            prompt_set,
            jobs,
            out,
        }) => snippets_extract(&mut ctx, &reports, prompt_set.as_deref(), jobs, &out),
        Command::Snippets(SnippetsCmd::Verify {
            snippets,
            labels,
            out,
        }) => snippets_verify(&mut ctx, &snippets, &labels, &out),
        Command::Agent(AgentCmd::Run(args)) => {
            ctx.config.run.mode = args.mode;
            if let Some(k) = args.k {
                ctx.config.run.k = k;
            }
            validate_run(&ctx.config.run)?;
            agent_run(
                &mut ctx,
                &args.study,
                args.draft.as_deref(),
                args.query.as_deref(),
                &args.out,
            )
        }
        Command::Eval(EvalCmd::Cohort(args)) => eval_cohort(&mut ctx, &args),
        Command::Eval(EvalCmd::Ksweep { cohort, ks }) => eval_ksweep(&mut ctx, &cohort, &ks),
        Command::Eval(EvalCmd::Sensitivity { cohort, decile }) => {
            eval_sensitivity(&mut ctx, &cohort, decile)
        }
    }
}

fn validate_run(run: &RunConfig) -> Result<()> {
    run.validate().map_err(|e| match e {
        AgentError::InvalidConfig { field, reason } => CliError::Config(ConfigError::Invalid {
            field: format!("run.{field}"),
            reason,
        }),
        other => CliError::Usage(other.to_string()),
    })
}

// ---- shared loading helpers

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(runtime(format!("reading {}", path.display())))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(runtime(format!("creating {}", path.display())))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    fs::write(path, text).map_err(runtime(format!("writing {}", path.display())))
}

fn pretty<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("value serializes");
    s.push('\n');
    s
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(runtime(format!("opening {}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(runtime(format!("reading {}", path.display())))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(runtime(format!(
            "{}:{}",
            path.display(),
            i + 1
        )))?);
    }
    Ok(out)
}

fn registry(config: &PipelineConfig) -> Result<ToolRegistry> {
    match &config.registry {
        Some(p) => ToolRegistry::from_json(&read_text(p)?)
            .map_err(runtime(format!("registry {}", p.display()))),
        None => Ok(ToolRegistry::default_registry()),
    }
}

fn lexicon(config: &PipelineConfig) -> Result<Lexicon> {
    match &config.lexicon {
        Some(p) => {
            Lexicon::from_json(&read_text(p)?).map_err(runtime(format!("lexicon {}", p.display())))
        }
        None => Ok(Lexicon::default_lexicon()),
    }
}

fn index_from(path: &Path) -> Result<Index> {
    let file = fs::File::open(path).map_err(runtime(format!("opening {}", path.display())))?;
    Index::load(BufReader::new(file)).map_err(runtime(format!("index {}", path.display())))
}

fn config_index(config: &PipelineConfig, command: &str) -> Result<(Index, PathBuf)> {
    let path = config.index.clone().ok_or_else(|| {
        CliError::Config(ConfigError::Invalid {
            field: "index".into(),
            reason: format!("required by {command}"),
        })
    })?;
    Ok((index_from(&path)?, path))
}

fn backend(config: &PipelineConfig, command: &str) -> Result<Box<dyn ChatBackend>> {
    match &config.backend {
        Some(BackendConfig::Scripted { fixture }) => {
            let file = fs::File::open(fixture)
                .map_err(runtime(format!("opening {}", fixture.display())))?;
            Ok(Box::new(
                ScriptedBackend::from_jsonl(BufReader::new(file))
                    .map_err(runtime(format!("fixture {}", fixture.display())))?,
            ))
        }
        Some(BackendConfig::Http(h)) => Ok(Box::new(
            HttpBackend::new(h.clone()).map_err(runtime("backend"))?,
        )),
        None => Err(CliError::Config(ConfigError::Invalid {
            field: "backend".into(),
            reason: format!("required by {command}"),
        })),
    }
}

fn classifier(config: &PipelineConfig, lexicon: &Lexicon) -> Result<Box<dyn LabelClassifier>> {
    match &config.classifier {
        Some(c) => Ok(Box::new(
            RemoteClassifier::new(c.url.clone(), c.timeout_secs, c.threshold)
                .map_err(runtime("classifier"))?,
        )),
        None => Ok(Box::new(LexiconClassifier::new(lexicon.clone()))),
    }
}

fn study(dir: &Path) -> Result<StudyBundle> {
    load_study(dir).map_err(runtime(format!("study {}", dir.display())))
}

fn manifest(ctx: &Ctx, command: &str) -> RunManifest {
    let mut m = RunManifest::new(command);
    m.config_sha256 = ctx.digest.clone();
    m
}

fn with_index(m: &mut RunManifest, index: &Index) {
    m.schema_id = Some(index.schema_id().to_string());
    m.index_stats_sha256 = Some(sha256_hex(index.stats_line().as_bytes()));
}

fn input(m: &mut RunManifest, name: &str, path: &Path) -> Result<()> {
    m.input(name, path)
        .map_err(runtime(format!("hashing {}", path.display())))
}

fn finish(m: RunManifest, out: &Path) -> Result<()> {
    m.finish(out).map_err(runtime("writing run manifest"))
}

// ---- phantom / features / index

fn phantom_make(ctx: &mut Ctx, spec_path: &Path, out: &Path) -> Result<()> {
    let spec: PhantomSpec = serde_json::from_str(&read_text(spec_path)?)
        .map_err(runtime(format!("phantom spec {}", spec_path.display())))?;
    let bundle = make_phantom(&spec).map_err(runtime("phantom"))?;
    create_dir(out)?;
    save_study(&bundle, out).map_err(runtime(format!("saving study to {}", out.display())))?;
    let mut m = manifest(ctx, "phantom make");
    input(&mut m, "spec", spec_path)?;
    finish(m, out)?;
    let _ = writeln!(
        ctx.out,
        "wrote study '{}' with {} mask(s) to {}",
        bundle.study_id,
        bundle.masks.len(),
        out.display()
    );
    Ok(())
}

fn features_extract(ctx: &mut Ctx, study_dir: &Path, out: &Path) -> Result<()> {
    let reg = registry(&ctx.config)?;
    let s = study(study_dir)?;
    let planes = estimate_midplanes(&s);
    create_dir(out)?;
    for tool in &reg.tools {
        let fv = run_tool(&s, tool, &reg.schema_id, planes);
        write_file(
            &out.join(format!("{}.json", tool.pathology_id)),
            &pretty(&fv),
        )?;
    }
    let mut m = manifest(ctx, "features extract");
    m.schema_id = Some(reg.schema_id.clone());
    input(&mut m, "study", study_dir)?;
    finish(m, out)?;
    let _ = writeln!(
        ctx.out,
        "wrote {} feature vectors ({} dims) to {}",
        reg.tools.len(),
        reg.dimension(),
        out.display()
    );
    Ok(())
}

fn read_features(path: &Path) -> Result<FeatureVector> {
    serde_json::from_str(&read_text(path)?).map_err(runtime(format!("features {}", path.display())))
}

fn index_build(
    ctx: &mut Ctx,
    snippet_files: &[PathBuf],
    features_root: &Path,
    out: &Path,
) -> Result<()> {
    let mut entries = Vec::new();
    for file in snippet_files {
        for s in read_jsonl::<ExtractedSnippet>(file)? {
            let path = features_root
                .join(&s.source_id)
                .join(format!("{}.json", s.pathology_id));
            let features = read_features(&path)?;
            if features.pathology_id != s.pathology_id {
                return Err(CliError::Runtime {
                    context: path.display().to_string(),
                    message: format!(
                        "holds '{}' features, snippet is for '{}'",
                        features.pathology_id, s.pathology_id
                    ),
                });
            }
            entries.push(ReferenceEntry {
                entry_id: entries.len() as u64,
                pathology_id: s.pathology_id,
                features,
                snippet: s.text,
                source_id: s.source_id,
            });
        }
    }
    let n = entries.len();
    let index = Index::build(entries).map_err(runtime("index build"))?;
    create_dir(out)?;
    let mut buf = Vec::new();
    index.save(&mut buf).map_err(runtime("index save"))?;
    write_file(
        &out.join("index.jsonl"),
        std::str::from_utf8(&buf).expect("index is UTF-8"),
    )?;
    let mut m = manifest(ctx, "index build");
    with_index(&mut m, &index);
    for (i, f) in snippet_files.iter().enumerate() {
        input(&mut m, &format!("snippets[{i}]"), f)?;
    }
    input(&mut m, "features_root", features_root)?;
    finish(m, out)?;
    let _ = writeln!(
        ctx.out,
        "indexed {n} entries over {} pathologies",
        index.pathologies().count()
    );
    Ok(())
}

fn index_query(
    ctx: &mut Ctx,
    index_path: Option<&Path>,
    features: &Path,
    k: Option<usize>,
    out: &Path,
) -> Result<()> {
    let (index, path) = match index_path {
        Some(p) => (index_from(p)?, p.to_path_buf()),
        None => config_index(&ctx.config, "index query")?,
    };
    let k = k.unwrap_or(ctx.config.run.k);
    if k == 0 {
        return Err(CliError::Usage("--k must be at least 1".into()));
    }
    let fv = read_features(features)?;
    let result = index
        .knn_query(&fv.pathology_id, &fv, k)
        .map_err(runtime("query"))?;
    create_dir(out)?;
    write_file(&out.join("neighbors.json"), &pretty(&result))?;
    let mut m = manifest(ctx, "index query");
    with_index(&mut m, &index);
    m.k = Some(k);
    input(&mut m, "index", &path)?;
    input(&mut m, "features", features)?;
    finish(m, out)?;
    for (i, n) in result.neighbors.iter().enumerate() {
        let _ = writeln!(ctx.out, "{}. [{:.3}] {}", i + 1, n.distance, n.snippet);
    }
    Ok(())
}

// ---- snippets

#[derive(Deserialize)]
struct ReportLine {
    source_id: String,
    text: String,
}

fn snippets_extract(
    ctx: &mut Ctx,
    reports: &Path,
    prompt_set: Option<&Path>,
    jobs: Option<usize>,
    out: &Path,
) -> Result<()> {
    let sets: Vec<PathBuf> = match prompt_set {
        Some(p) => vec![p.to_path_buf()],
        None if !ctx.config.prompt_sets.is_empty() => ctx.config.prompt_sets.clone(),
        None => {
            return Err(CliError::Usage(
                "no prompt set: pass --prompt-set or set prompt_sets in the config".into(),
            ))
        }
    };
    let jobs = jobs.unwrap_or(ctx.config.jobs);
    if jobs == 0 {
        return Err(CliError::Usage("--jobs must be at least 1".into()));
    }
    let backend = backend(&ctx.config, "snippets extract")?;
    let reports: Vec<(String, String)> = read_jsonl::<ReportLine>(reports)?
        .into_iter()
        .map(|r| (r.source_id, r.text))
        .collect();
    let mut lines = String::new();
    let mut failures = Vec::new();
    let mut count = 0;
    for path in &sets {
        let set = ExtractionPromptSet::from_json(&read_text(path)?)
            .map_err(runtime(format!("prompt set {}", path.display())))?;
        let outcome = extract_snippets(
            &reports,
            &set,
            backend.as_ref(),
            &ctx.config.run.model,
            jobs,
        );
        for s in &outcome.snippets {
            lines.push_str(&serde_json::to_string(s).expect("snippet serializes"));
            lines.push('\n');
        }
        count += outcome.snippets.len();
        failures.push(
            serde_json::json!({ "pathology": set.pathology_id, "failures": outcome.failures }),
        );
    }
    create_dir(out)?;
    write_file(&out.join("snippets.jsonl"), &lines)?;
    write_file(&out.join("failures.json"), &pretty(&failures))?;
    let mut m = manifest(ctx, "snippets extract");
    m.backend_kind = Some(backend.kind().to_string());
    for (i, p) in sets.iter().enumerate() {
        input(&mut m, &format!("prompt_sets[{i}]"), p)?;
    }
    finish(m, out)?;
    let n_failed: usize = failures
        .iter()
        .map(|f| f["failures"].as_array().map_or(0, Vec::len))
        .sum();
    let _ = writeln!(
        ctx.out,
        "extracted {count} snippet(s), {n_failed} failure(s)"
    );
    Ok(())
}

#[derive(Deserialize)]
struct LabelLine {
    source_id: String,
    pathology: String,
    present: bool,
}

fn snippets_verify(ctx: &mut Ctx, snippets: &Path, labels: &Path, out: &Path) -> Result<()> {
    let snippets: Vec<ExtractedSnippet> = read_jsonl(snippets)?;
    let mut by_pathology: BTreeMap<String, BTreeMap<String, bool>> = BTreeMap::new();
    for l in read_jsonl::<LabelLine>(labels)? {
        by_pathology
            .entry(l.pathology)
            .or_default()
            .insert(l.source_id, l.present);
    }
    let mut results = BTreeMap::new();
    let pathologies: BTreeSet<&str> = snippets.iter().map(|s| s.pathology_id.as_str()).collect();
    for p in pathologies {
        let subset: Vec<ExtractedSnippet> = snippets
            .iter()
            .filter(|s| s.pathology_id == p)
            .cloned()
            .collect();
        let empty = BTreeMap::new();
        let labels = by_pathology.get(p).unwrap_or(&empty);
        let r = template_f1_verify(&subset, labels).map_err(runtime(format!("verifying {p}")))?;
        results.extend(r);
    }
    create_dir(out)?;
    write_file(&out.join("verification.json"), &pretty(&results))?;
    finish(manifest(ctx, "snippets verify"), out)?;
    for (p, v) in &results {
        let _ = writeln!(
            ctx.out,
            "{p}: P={:.3} R={:.3} F1={:.3}",
            v.scores.precision, v.scores.recall, v.scores.f1
        );
    }
    Ok(())
}

// ---- agent

fn query(ctx: &Ctx, flag: Option<&str>) -> String {
    flag.map(str::to_string)
        .or_else(|| ctx.config.query.clone())
        .unwrap_or_else(|| DEFAULT_QUERY.to_string())
}

fn agent_run(
    ctx: &mut Ctx,
    study_dir: &Path,
    draft: Option<&Path>,
    q: Option<&str>,
    out: &Path,
) -> Result<()> {
    let reg = registry(&ctx.config)?;
    let (index, index_path) = config_index(&ctx.config, "agent run")?;
    let backend = backend(&ctx.config, "agent run")?;
    let s = study(study_dir)?;
    let draft_text = draft.map(read_text).transpose()?;
    let q = query(ctx, q);
    let agent = Agent::new(&reg, &index, backend.as_ref(), &ctx.config.run);
    let result = agent.run(&s, &q, draft_text.as_deref());

    create_dir(out)?;
    let mut m = manifest(ctx, "agent run");
    with_index(&mut m, &index);
    m.k = Some(ctx.config.run.k);
    m.mode = Some(ctx.config.run.mode.to_string());
    m.backend_kind = Some(backend.kind().to_string());
    input(&mut m, "study", study_dir)?;
    input(&mut m, "index", &index_path)?;
    if let Some(d) = draft {
        input(&mut m, "draft", d)?;
    }
    match result {
        Ok(outcome) => {
            write_file(&out.join("report.txt"), &format!("{}\n", outcome.report))?;
            write_file(&out.join("trace.json"), &outcome.trace.to_json())?;
            finish(m, out)?;
            let _ = writeln!(
                ctx.out,
                "{} step(s), termination {:?}, {} tokens",
                outcome.evidence.len(),
                outcome.trace.termination.expect("set on success"),
                outcome.trace.totals.total_tokens
            );
            Ok(())
        }
        Err(AgentError::Aborted { trace, source }) => {
            write_file(&out.join("trace.json"), &trace.to_json())?;
            finish(m, out)?;
            Err(CliError::Runtime {
                context: "agent run aborted".into(),
                message: source.to_string(),
            })
        }
        Err(AgentError::MissingDraft) => {
            Err(CliError::Usage("refine mode requires --draft".into()))
        }
        Err(e) => Err(runtime("agent run")(e)),
    }
}

// ---- evaluation

#[derive(Deserialize)]
struct CohortLine {
    study_dir: PathBuf,
    gold_labels_path: PathBuf,
    reference_report_path: PathBuf,
    #[serde(default)]
    draft_path: Option<PathBuf>,
}

struct LoadedCase {
    study: StudyBundle,
    gold: GoldLabels,
    reference: String,
    draft: Option<String>,
}

fn load_cohort(ctx: &Ctx, args: &CohortArgs) -> Result<(Vec<LoadedCase>, PathBuf)> {
    let path = args
        .manifest
        .clone()
        .or_else(|| ctx.config.cohort_manifest.clone())
        .ok_or_else(|| {
            CliError::Usage(
                "no cohort manifest: pass --manifest or set cohort_manifest in the config".into(),
            )
        })?;
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let resolve = |p: &Path| {
        if p.is_relative() {
            base.join(p)
        } else {
            p.to_path_buf()
        }
    };
    let mut cases = Vec::new();
    let mut seen = BTreeSet::new();
    for line in read_jsonl::<CohortLine>(&path)? {
        let s = study(&resolve(&line.study_dir))?;
        if !seen.insert(s.study_id.clone()) {
            return Err(CliError::Runtime {
                context: path.display().to_string(),
                message: format!("duplicate study '{}'", s.study_id),
            });
        }
        let gold_path = resolve(&line.gold_labels_path);
        let gold: GoldLabels = serde_json::from_str(&read_text(&gold_path)?)
            .map_err(runtime(format!("gold labels {}", gold_path.display())))?;
        let draft = line
            .draft_path
            .map(|p| read_text(&resolve(&p)))
            .transpose()?;
        cases.push(LoadedCase {
            study: s,
            gold,
            reference: read_text(&resolve(&line.reference_report_path))?,
            draft,
        });
    }
    if cases.is_empty() {
        return Err(CliError::Runtime {
            context: path.display().to_string(),
            message: "cohort is empty".into(),
        });
    }
    Ok((cases, path))
}

struct Generated {
    inputs: Vec<CaseInput>,
    traces: Vec<(String, String)>,
}

/// Run the agent on every case with at most `jobs` studies in flight.
fn generate(
    cases: &[LoadedCase],
    reg: &ToolRegistry,
    index: &Index,
    backend: &dyn ChatBackend,
    run: &RunConfig,
    q: &str,
    jobs: usize,
) -> std::result::Result<Generated, String> {
    let results = Execution::default().install(jobs, |exec| {
        exec.map_slice(cases, |c| {
            let agent = Agent::new(reg, index, backend, run).with_execution(Execution::Sequential);
            agent
                .run(&c.study, q, c.draft.as_deref())
                .map_err(|e| format!("{}: {e}", c.study.study_id))
        })
    });
    let mut inputs = Vec::new();
    let mut traces = Vec::new();
    for (c, r) in cases.iter().zip(results) {
        let outcome = r?;
        traces.push((c.study.study_id.clone(), outcome.trace.to_json()));
        inputs.push(CaseInput {
            study_id: c.study.study_id.clone(),
            generated: outcome.report,
            reference: c.reference.clone(),
            gold: c.gold.clone(),
        });
    }
    Ok(Generated { inputs, traces })
}

struct EvalSetup {
    reg: ToolRegistry,
    index: Index,
    index_path: PathBuf,
    backend: Box<dyn ChatBackend>,
    lexicon: Lexicon,
    classifier: Box<dyn LabelClassifier>,
    cases: Vec<LoadedCase>,
    manifest_path: PathBuf,
    jobs: usize,
}

fn eval_setup(ctx: &Ctx, args: &CohortArgs, command: &str) -> Result<EvalSetup> {
    let jobs = args.jobs.unwrap_or(ctx.config.jobs);
    if jobs == 0 {
        return Err(CliError::Usage("--jobs must be at least 1".into()));
    }
    let lexicon = lexicon(&ctx.config)?;
    let (index, index_path) = config_index(&ctx.config, command)?;
    let (cases, manifest_path) = load_cohort(ctx, args)?;
    Ok(EvalSetup {
        reg: registry(&ctx.config)?,
        index,
        index_path,
        backend: backend(&ctx.config, command)?,
        classifier: classifier(&ctx.config, &lexicon)?,
        lexicon,
        cases,
        manifest_path,
        jobs,
    })
}

fn eval_manifest(ctx: &Ctx, setup: &EvalSetup, command: &str) -> Result<RunManifest> {
    let mut m = manifest(ctx, command);
    with_index(&mut m, &setup.index);
    m.k = Some(ctx.config.run.k);
    m.mode = Some(ctx.config.run.mode.to_string());
    m.backend_kind = Some(setup.backend.kind().to_string());
    input(&mut m, "cohort_manifest", &setup.manifest_path)?;
    input(&mut m, "index", &setup.index_path)?;
    m.extra
        .insert("classifier".into(), setup.classifier.kind().into());
    Ok(m)
}

fn run_cohort(
    ctx: &Ctx,
    setup: &EvalSetup,
    run: &RunConfig,
) -> Result<(CohortResult, Vec<(String, String)>)> {
    let q = query(ctx, None);
    let generated = generate(
        &setup.cases,
        &setup.reg,
        &setup.index,
        setup.backend.as_ref(),
        run,
        &q,
        setup.jobs,
    )
    .map_err(runtime("agent run"))?;
    let exec = Execution::default();
    let result = exec
        .install(setup.jobs, |e| {
            evaluate_cohort(
                &generated.inputs,
                setup.classifier.as_ref(),
                &setup.lexicon,
                e,
            )
        })
        .map_err(runtime("evaluation"))?;
    let reports = generated
        .inputs
        .iter()
        .map(|c| (c.study_id.clone(), c.generated.clone()));
    let mut files = Vec::new();
    for ((id, report), (_, trace)) in reports.zip(generated.traces) {
        files.push((format!("reports/{id}.txt"), format!("{report}\n")));
        files.push((format!("traces/{id}.json"), trace));
    }
    Ok((result, files))
}

fn eval_cohort(ctx: &mut Ctx, args: &CohortArgs) -> Result<()> {
    let setup = eval_setup(ctx, args, "eval cohort")?;
    let (result, files) = run_cohort(ctx, &setup, &ctx.config.run)?;
    create_dir(&args.out)?;
    for (rel, text) in files {
        write_file(&args.out.join(rel), &text)?;
    }
    write_file(&args.out.join("cohort.csv"), &result.to_csv())?;
    write_file(&args.out.join("summary.json"), &pretty(&result.metrics))?;
    finish(eval_manifest(ctx, &setup, "eval cohort")?, &args.out)?;
    print_bundle(ctx.out, &result.metrics);
    Ok(())
}

fn print_bundle(out: &mut dyn Write, m: &MetricsBundle) {
    let _ = writeln!(
        out,
        "n={} macro_f1={:.3} bleu1={:.3} rouge_l={:.3} meteor={:.3} laterality_f1={}",
        m.n_cases,
        m.macro_f1,
        m.bleu1,
        m.rouge_l,
        m.meteor,
        m.laterality_f1
            .map_or("n/a".to_string(), |v| format!("{v:.3}"))
    );
}

fn eval_ksweep(ctx: &mut Ctx, args: &CohortArgs, ks: &[usize]) -> Result<()> {
    let setup = eval_setup(ctx, args, "eval ksweep")?;
    let q = query(ctx, None);
    let base = ctx.config.run.clone();
    let runner = |k: usize| {
        let run = RunConfig { k, ..base.clone() };
        generate(
            &setup.cases,
            &setup.reg,
            &setup.index,
            setup.backend.as_ref(),
            &run,
            &q,
            setup.jobs,
        )
        .map(|g| g.inputs)
    };
    let sweep = k_sweep(
        ks,
        runner,
        setup.classifier.as_ref(),
        &setup.lexicon,
        Execution::default(),
    )
    .map_err(|e| CliError::Usage(e.to_string()))?;
    create_dir(&args.out)?;
    write_file(&args.out.join("ksweep.csv"), &sweep.to_csv())?;
    write_file(&args.out.join("ksweep.json"), &pretty(&sweep))?;
    let mut m = eval_manifest(ctx, &setup, "eval ksweep")?;
    m.extra.insert(
        "ks".into(),
        serde_json::json!(sweep.rows.iter().map(|r| r.k).collect::<Vec<_>>()),
    );
    finish(m, &args.out)?;
    for r in &sweep.rows {
        match (&r.metrics, &r.error) {
            (Some(b), _) => {
                let _ = write!(ctx.out, "k={:<3} ", r.k);
                print_bundle(ctx.out, b);
            }
            (None, e) => {
                let _ = writeln!(
                    ctx.out,
                    "k={:<3} error: {}",
                    r.k,
                    e.as_deref().unwrap_or("unknown")
                );
            }
        }
    }
    Ok(())
}

fn eval_sensitivity(ctx: &mut Ctx, args: &CohortArgs, decile: f64) -> Result<()> {
    let setup = eval_setup(ctx, args, "eval sensitivity")?;
    let mut volumes = BTreeMap::new();
    for c in &setup.cases {
        let lungs = resolve_structure(&c.study, "lungs").ok_or_else(|| CliError::Runtime {
            context: c.study.study_id.clone(),
            message: "no lung mask for the lung-volume ranking".into(),
        })?;
        volumes.insert(c.study.study_id.clone(), absolute_volume(&lungs));
    }
    let flagged =
        oversegmentation_flag(&volumes, decile).map_err(|e| CliError::Usage(e.to_string()))?;
    let (result, _) = run_cohort(ctx, &setup, &ctx.config.run)?;
    let subset: Vec<_> = result
        .cases
        .iter()
        .filter(|c| flagged.contains(&c.study_id))
        .cloned()
        .collect();
    let subset_metrics = MetricsBundle::from_cases(&subset).map_err(runtime("subset metrics"))?;
    let report = sensitivity_report(&result.metrics, &subset_metrics, &LUNG_PATHOLOGIES)
        .map_err(runtime("sensitivity"))?;
    let doc = serde_json::json!({
        "decile": decile,
        "n_full": result.cases.len(),
        "n_subset": subset.len(),
        "flagged": flagged,
        "lung_volumes_mm3": volumes,
        "report": report,
        "full": result.metrics,
        "subset": subset_metrics,
    });
    create_dir(&args.out)?;
    write_file(&args.out.join("sensitivity.json"), &pretty(&doc))?;
    finish(eval_manifest(ctx, &setup, "eval sensitivity")?, &args.out)?;
    let _ = writeln!(
        ctx.out,
        "flagged {}/{}: delta macro F1 all={:.3} lung={:.3}",
        subset.len(),
        result.cases.len(),
        report.delta_all,
        report.delta_lung
    );
    Ok(())
}

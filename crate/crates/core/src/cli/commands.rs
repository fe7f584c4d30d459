use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use super::manifest::{RunManifest, MANIFEST_FILE};
use super::*;
use crate::engine::{generate, SessionPair, StepTrace};
use crate::experiment::{
    analyze_world, derive_seed, run_experiment, sweep_csv, sweep_gamma, trace_csv, ContrastSource, JobOutput,
};
use crate::metrics::{chair_scores, jsd_stats, CaptionRecord, ChairScores, JsdStats};
use crate::protocol::client::{Connection, RemoteBackend};
use crate::protocol::conformance::run_conformance;
use crate::protocol::server::serve;
use crate::protocol::session::{Backend, BackendInfo, TokenId};
use crate::selector::{select_random_id, select_retrieved, EmbeddingStore, SelectionMode, SelectionResult};
use crate::sim::backend::SimBackend;
use crate::sim::calibrate::{calibrate, CalibrationSettings};
use crate::sim::world::{build_world, trap_world, SynthWorld, TrapConfig, WorldConfig, END_TOKEN};

pub(super) fn dispatch(cli: Cli, argv: &[String]) -> CliResult {
    let exec = cli.execution;
    match cli.command {
        Command::Decode(a) => decode(a, exec, argv),
        Command::Experiment(a) => experiment(a, exec, argv),
        Command::SweepGamma(a) => sweep(a, exec, argv),
        Command::Analyze(a) => analyze(a, exec, argv),
        Command::World(WorldCommand::Build(a)) => world_build(a, exec, argv),
        Command::ServeSim(a) => serve_sim(a),
        Command::Conformance(a) => conformance(a),
        Command::Replay(a) => replay(a),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| CliError::internal(e.to_string()))?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

fn out_dir(path: &Path) -> CliResult {
    fs::create_dir_all(path).map_err(|e| CliError::usage(format!("cannot create {}: {e}", path.display())))
}

fn load_world(path: &Path) -> CliResult<Arc<SynthWorld>> {
    Ok(Arc::new(SynthWorld::load(path)?))
}

fn world_info(world: &SynthWorld) -> BackendInfo {
    BackendInfo::from_token_table(world.token_table(), Some(END_TOKEN))
}

/// Whitespace-separated token ids or vocabulary words.
fn parse_prompt(s: &str, info: &BackendInfo) -> CliResult<Vec<TokenId>> {
    s.split_whitespace()
        .map(|w| {
            let id = match w.parse::<TokenId>() {
                Ok(id) => id,
                Err(_) => info.token_id(w).ok_or_else(|| CliError::usage(format!("prompt word {w:?} is not in the vocabulary")))?,
            };
            if id as usize >= info.vocab_size {
                return Err(CliError::usage(format!("prompt token {id} is outside the vocabulary of {}", info.vocab_size)));
            }
            Ok(id)
        })
        .collect()
}

fn corpus_contrast(arg: &ContrastArg) -> CliResult<ContrastSource> {
    match arg {
        ContrastArg::Random => Ok(ContrastSource::Random),
        ContrastArg::Retrieve(p) => Ok(ContrastSource::Retrieve(Arc::new(EmbeddingStore::load(p)?))),
        ContrastArg::Image(_) => Err(CliError::usage("corpus runs take --contrast random or retrieve:<file>")),
    }
}

fn add_contrast_input(m: &mut RunManifest, arg: &ContrastArg) -> CliResult {
    if let ContrastArg::Retrieve(p) = arg {
        m.add_input("embeddings", p)?;
    }
    Ok(())
}

fn seed_range(a: &CorpusArgs) -> CliResult<Vec<u64>> {
    if a.num_seeds == 0 {
        return Err(CliError::usage("--num-seeds must be positive"));
    }
    let end = a.seed.checked_add(a.num_seeds).ok_or_else(|| CliError::usage("seed range overflows"))?;
    Ok((a.seed..end).collect())
}

#[derive(Serialize)]
struct DecodeReport<'a> {
    image_id: &'a str,
    contrast: &'a SelectionResult,
    prompt: &'a [TokenId],
    tokens: &'a [TokenId],
    text: &'a str,
    steps: usize,
    gated_steps: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    jsd: Option<JsdStats>,
    #[serde(skip_serializing_if = "Option::is_none")]
    chair: Option<ChairScores>,
    engine: &'a EngineConfig,
}

fn decode(a: DecodeArgs, exec: Execution, argv: &[String]) -> CliResult {
    let cfg = a.engine.config(a.seed, a.full_trace);
    cfg.validate()?;
    let (backend, world): (Box<dyn Backend>, Option<Arc<SynthWorld>>) = match &a.backend {
        BackendSpec::Sim(p) => {
            let w = load_world(p)?;
            (Box::new(SimBackend::new(Arc::clone(&w))), Some(w))
        }
        BackendSpec::Remote(ep) => (Box::new(RemoteBackend::connect(ep)?), None),
    };
    let info = backend.info().clone();
    let prompt = parse_prompt(&a.prompt, &info)?;
    let contrast = match &a.contrast {
        ContrastArg::Random => {
            let ids = info
                .images
                .clone()
                .ok_or_else(|| CliError::usage("backend does not list its images; name the contrast image"))?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(a.seed, 0, "contrast"));
            select_random_id(&ids, &a.image, &mut rng)?
        }
        ContrastArg::Retrieve(p) => {
            let store = EmbeddingStore::load(p)?;
            let v = store.vector(&a.image).ok_or_else(|| CliError::usage(format!("no embedding for {:?}", a.image)))?;
            select_retrieved(&store, &a.image, v, exec)?
        }
        ContrastArg::Image(id) if *id == a.image => {
            return Err(CliError::usage("contrast image must differ from the image"))
        }
        ContrastArg::Image(id) => SelectionResult { chosen_id: id.clone(), similarity: None, mode: SelectionMode::Explicit },
    };

    out_dir(&a.out)?;
    let mut pair = SessionPair::open(backend.as_ref(), backend.as_ref(), &a.image, &contrast.chosen_id, &prompt)?;
    let result = generate(&mut pair, &cfg)?;
    pair.close()?;

    let mut w = BufWriter::new(File::create(a.out.join("trace.jsonl"))?);
    for t in &result.traces {
        serde_json::to_writer(&mut w, t).map_err(|e| CliError::internal(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;

    let jsd = jsd_stats(&result.traces, cfg.gamma).ok();
    let csv = jsd.as_ref().map(JsdStats::to_csv).unwrap_or_else(|| "bin_low,bin_high,count\n".into());
    fs::write(a.out.join("histogram.csv"), csv)?;
    let chair = match &world {
        Some(w) => {
            let image = w.image_index(&a.image)?;
            let rec = CaptionRecord {
                image_id: a.image.clone(),
                mentions: result.tokens.iter().filter_map(|&t| w.token_object(t)).collect(),
                truth: w.images[image].objects.iter().copied().collect(),
            };
            Some(chair_scores(&[rec]).map_err(|e| CliError::internal(e.to_string()))?)
        }
        None => None,
    };
    let report = DecodeReport {
        image_id: &a.image,
        contrast: &contrast,
        prompt: &prompt,
        tokens: &result.tokens,
        text: &result.text,
        steps: result.traces.len(),
        gated_steps: result.traces.iter().filter(|t| t.gated).count(),
        jsd,
        chair,
        engine: &cfg,
    };
    write_json(&a.out.join("report.json"), &report)?;

    let mut m = RunManifest::new(
        "decode",
        argv,
        json!({"engine": cfg, "image": a.image, "contrast": contrast, "prompt": prompt, "backend": backend_label(&a.backend)}),
        vec![a.seed],
    );
    if let BackendSpec::Sim(p) = &a.backend {
        m.add_input("world", p)?;
    }
    add_contrast_input(&mut m, &a.contrast)?;
    m.write(&a.out.join(MANIFEST_FILE))?;
    println!("{}", result.text);
    Ok(())
}

fn backend_label(b: &BackendSpec) -> String {
    match b {
        BackendSpec::Sim(p) => format!("sim:{}", p.display()),
        BackendSpec::Remote(ep) => ep.to_string(),
    }
}

#[derive(Serialize)]
struct TaggedTrace<'a> {
    arm: &'a str,
    seed: u64,
    image_id: &'a str,
    contrast_id: &'a str,
    #[serde(flatten)]
    trace: &'a StepTrace,
}

fn write_corpus_traces(path: &Path, labels: &[&str], jobs: &[JobOutput]) -> CliResult {
    let mut w = BufWriter::new(File::create(path)?);
    for job in jobs {
        for (label, run) in labels.iter().zip(&job.runs) {
            for t in &run.traces {
                let line = TaggedTrace { arm: label, seed: run.seed, image_id: &run.image_id, contrast_id: &run.contrast_id, trace: t };
                serde_json::to_writer(&mut w, &line).map_err(|e| CliError::internal(e.to_string()))?;
                w.write_all(b"\n")?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn corpus_manifest(command: &str, argv: &[String], a: &CorpusArgs, extra: serde_json::Value, seeds: Vec<u64>) -> CliResult<RunManifest> {
    let cfg = a.engine.config(0, false);
    let mut config = json!({
        "engine": cfg,
        "images": a.images,
        "contrast": match &a.contrast {
            ContrastArg::Random => "random".to_owned(),
            ContrastArg::Retrieve(p) => format!("retrieve:{}", p.display()),
            ContrastArg::Image(id) => id.clone(),
        },
        "prompt": a.prompt,
    });
    if let (Some(obj), serde_json::Value::Object(more)) = (config.as_object_mut(), extra) {
        obj.extend(more);
    }
    let mut m = RunManifest::new(command, argv, config, seeds);
    m.add_input("world", &a.world)?;
    add_contrast_input(&mut m, &a.contrast)?;
    Ok(m)
}

fn experiment(a: CorpusArgs, exec: Execution, argv: &[String]) -> CliResult {
    let world = load_world(&a.world)?;
    let seeds = seed_range(&a)?;
    let contrast = corpus_contrast(&a.contrast)?;
    let prompt = parse_prompt(&a.prompt, &world_info(&world))?;
    let engine = a.engine.config(0, false);
    out_dir(&a.out)?;
    let (report, jobs) = run_experiment(&world, &engine, seeds.clone(), a.images, contrast, prompt, exec)?;

    write_json(&a.out.join("report.json"), &report)?;
    let labels: Vec<&str> = report.arms.iter().map(|r| r.label.as_str()).collect();
    write_corpus_traces(&a.out.join("trace.jsonl"), &labels, &jobs)?;
    if let Some(cicd) = report.arm("cicd") {
        fs::write(a.out.join("histogram.csv"), cicd.jsd.to_csv())?;
    }
    corpus_manifest("experiment", argv, &a, json!({}), seeds)?.write(&a.out.join(MANIFEST_FILE))?;

    for arm in &report.arms {
        println!(
            "{:<8} chair_s={:.4} chair_i={:.4} recall={:.4} pope_f1={:.4} gated={:.4}",
            arm.label, arm.chair.chair_s, arm.chair.chair_i, arm.chair.recall, arm.pope.f1, arm.gated_fraction
        );
    }
    Ok(())
}

fn sweep(a: SweepArgs, exec: Execution, argv: &[String]) -> CliResult {
    let c = &a.corpus;
    let world = load_world(&c.world)?;
    let seeds = seed_range(c)?;
    let contrast = corpus_contrast(&c.contrast)?;
    let prompt = parse_prompt(&c.prompt, &world_info(&world))?;
    let engine = c.engine.config(0, false);
    out_dir(&c.out)?;
    let (rows, report) = sweep_gamma(&world, &engine, &a.gammas, seeds.clone(), c.images, contrast, prompt, exec)?;

    let csv = sweep_csv(&rows);
    fs::write(c.out.join("sweep.csv"), &csv)?;
    write_json(&c.out.join("report.json"), &report)?;
    let gammas: Vec<String> = a.gammas.iter().map(|&g| crate::serde_ext::format_ext_f64(g)).collect();
    corpus_manifest("sweep-gamma", argv, c, json!({ "gammas": gammas }), seeds)?.write(&c.out.join(MANIFEST_FILE))?;
    print!("{csv}");
    Ok(())
}

fn analyze(a: AnalyzeArgs, exec: Execution, argv: &[String]) -> CliResult {
    out_dir(&a.out)?;
    let m = match (&a.world, &a.trace) {
        (Some(path), _) => {
            let world = load_world(path)?;
            let report = analyze_world(&world, a.pairs, a.seed, exec)?;
            write_json(&a.out.join("report.json"), &report)?;
            for (name, d) in [("function", &report.function), ("object", &report.object), ("end", &report.end)] {
                println!(
                    "{name:<8} steps={} cosine_max={:.3e} jsd_mean={:.3e} zero_jsd={:.4}",
                    d.steps, d.cosine_distance.max, d.jsd.mean, d.zero_jsd_fraction
                );
            }
            let mut m = RunManifest::new("analyze", argv, json!({"pairs": a.pairs, "mode": "world"}), vec![a.seed]);
            m.add_input("world", path)?;
            m
        }
        (None, Some(path)) => {
            let reader = BufReader::new(File::open(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?);
            let mut traces = Vec::new();
            for (n, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let t: StepTrace = serde_json::from_str(&line)
                    .map_err(|e| CliError::usage(format!("{}:{}: {e}", path.display(), n + 1)))?;
                traces.push(t);
            }
            fs::write(a.out.join("jsd.csv"), trace_csv(&traces))?;
            println!("{} steps", traces.len());
            let mut m = RunManifest::new("analyze", argv, json!({"mode": "trace"}), vec![a.seed]);
            m.add_input("trace", path)?;
            m
        }
        (None, None) => return Err(CliError::usage("analyze needs --world or --trace")),
    };
    m.write(&a.out.join(MANIFEST_FILE))?;
    Ok(())
}

fn world_build(a: WorldBuildArgs, exec: Execution, argv: &[String]) -> CliResult {
    let world = match a.preset {
        Preset::Trap => trap_world(
            &TrapConfig { w_lang: a.trap_w_lang, w_vis: a.trap_w_vis, cooccurrence: a.trap_cooccurrence },
            a.seed,
        )?,
        Preset::Default => {
            let d = WorldConfig::default();
            let config = WorldConfig {
                n_images: a.images.unwrap_or(d.n_images),
                n_function: a.function_words.unwrap_or(d.n_function),
                n_objects: a.objects.unwrap_or(d.n_objects),
                objects_per_image: a.objects_per_image.unwrap_or(d.objects_per_image),
                cycles: a.cycles.unwrap_or(d.cycles),
                visual_leak: a.visual_leak.unwrap_or(d.visual_leak),
                prior_jitter: a.prior_jitter.unwrap_or(d.prior_jitter),
                w_vis_object: a.w_vis.unwrap_or(d.w_vis_object),
                ..d
            };
            let world = build_world(&config, a.seed)?;
            if a.w_vis.is_some() || a.no_calibrate {
                world
            } else {
                calibrate(&world, &CalibrationSettings::default(), exec)?
            }
        }
    };
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        out_dir(parent)?;
    }
    world.save(&a.out)?;

    let manifest_path = PathBuf::from(format!("{}.manifest.json", a.out.display()));
    let config = serde_json::to_value(&a).map_err(|e| CliError::internal(e.to_string()))?;
    RunManifest::new("world build", argv, config, vec![a.seed]).write(&manifest_path)?;

    println!(
        "{} images, {} tokens, w_vis_object={}, {} traps",
        world.images.len(),
        world.vocab_size(),
        world.config.w_vis_object,
        world.find_traps(1.25).len()
    );
    if let Some(c) = &world.calibration {
        println!(
            "calibrated: function<=gamma {:.4}, disjoint object>gamma {:.4}, p05 {:.3}",
            c.chosen.function_fraction_below, c.chosen.disjoint_object_fraction_above, c.chosen.disjoint_object_p05
        );
    }
    Ok(())
}

fn serve_sim(a: ServeArgs) -> CliResult {
    let backend = Arc::new(SimBackend::new(load_world(&a.world)?));
    let Some(listen) = a.listen else {
        let stdin = std::io::stdin();
        return serve(backend.as_ref(), stdin.lock(), std::io::stdout().lock())
            .map_err(|e| CliError::backend(format!("stdio transport: {e}")));
    };
    let spawn = |reader: Box<dyn BufRead + Send>, writer: Box<dyn Write + Send>| {
        let backend = Arc::clone(&backend);
        std::thread::spawn(move || {
            if let Err(e) = serve(backend.as_ref(), reader, writer) {
                eprintln!("connection closed: {e}");
            }
        });
    };
    if let Some(addr) = listen.strip_prefix("tcp:") {
        let listener = std::net::TcpListener::bind(addr).map_err(|e| CliError::backend(format!("bind {addr}: {e}")))?;
        eprintln!("listening on tcp:{}", listener.local_addr()?);
        for stream in listener.incoming() {
            let stream = stream.map_err(|e| CliError::backend(e.to_string()))?;
            spawn(Box::new(BufReader::new(stream.try_clone()?)), Box::new(stream));
        }
        return Ok(());
    }
    #[cfg(unix)]
    if let Some(path) = listen.strip_prefix("unix:") {
        let listener = std::os::unix::net::UnixListener::bind(path)
            .map_err(|e| CliError::backend(format!("bind {path}: {e}")))?;
        eprintln!("listening on unix:{path}");
        for stream in listener.incoming() {
            let stream = stream.map_err(|e| CliError::backend(e.to_string()))?;
            spawn(Box::new(BufReader::new(stream.try_clone()?)), Box::new(stream));
        }
        return Ok(());
    }
    Err(CliError::usage(format!("--listen takes tcp:<host:port> or unix:<path>, got {listen:?}")))
}

fn conformance(a: ConformanceArgs) -> CliResult {
    let images = a.images.map(|v| (v[0].clone(), v[1].clone()));
    let mut server = None;
    let conn = match &a.backend {
        BackendSpec::Remote(ep) => Connection::open(ep)?,
        #[cfg(unix)]
        BackendSpec::Sim(path) => {
            let backend = SimBackend::new(load_world(path)?);
            let (ours, theirs) = std::os::unix::net::UnixStream::pair()?;
            let reader = BufReader::new(theirs.try_clone()?);
            server = Some(std::thread::spawn(move || serve(&backend, reader, theirs)));
            Connection::new(Box::new(BufReader::new(ours.try_clone()?)), Box::new(ours))
        }
        #[cfg(not(unix))]
        BackendSpec::Sim(_) => return Err(CliError::usage("in-process conformance needs unix sockets; serve the world and use tcp:")),
    };
    let report = run_conformance(conn, images)?;
    if let Some(handle) = server {
        let _ = handle.join();
    }
    for c in &report.checks {
        if c.passed {
            println!("PASS {}", c.name);
        } else {
            println!("FAIL {}: {}", c.name, c.detail);
        }
    }
    let failed = report.failures().count();
    if failed > 0 {
        return Err(CliError::backend(format!("{failed} of {} conformance checks failed", report.checks.len())));
    }
    Ok(())
}

/// Replaces or appends `--out`; the value is resolved before the working
/// directory changes.
fn with_out(argv: &[String], out: &Path) -> Vec<String> {
    let mut args = Vec::with_capacity(argv.len() + 2);
    let mut it = argv.iter();
    while let Some(arg) = it.next() {
        if arg == "--out" {
            it.next();
        } else if !arg.starts_with("--out=") {
            args.push(arg.clone());
        }
    }
    args.push("--out".into());
    args.push(out.display().to_string());
    args
}

fn replay(a: ReplayArgs) -> CliResult {
    let m = RunManifest::read(&a.manifest).map_err(CliError::usage)?;
    if m.command == "replay" {
        return Err(CliError::usage("manifest records a replay"));
    }
    if m.version != env!("CARGO_PKG_VERSION") {
        eprintln!("warning: manifest written by version {}, running {}", m.version, env!("CARGO_PKG_VERSION"));
    }
    let mut args = match &a.out {
        Some(out) => {
            let abs = std::path::absolute(out)?;
            with_out(&m.argv, &abs)
        }
        None => m.argv.clone(),
    };
    let has_seed = args.iter().any(|x| x == "--seed" || x.starts_with("--seed="));
    if !has_seed {
        if let Some(&seed) = m.seeds.first() {
            args.push("--seed".into());
            args.push(seed.to_string());
        }
    }
    if std::env::current_dir().ok().as_deref() != Some(m.cwd.as_path()) {
        std::env::set_current_dir(&m.cwd)
            .map_err(|e| CliError::usage(format!("cannot enter recorded directory {}: {e}", m.cwd.display())))?;
    }
    let changed = m.changed_inputs();
    if !changed.is_empty() {
        return Err(CliError::usage(format!("inputs changed since the recorded run: {}", changed.join(", "))));
    }
    run_args(&args)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn out_is_replaced() {
        let argv: Vec<String> = ["experiment", "--out", "a", "--world", "w", "--out=b"].map(String::from).to_vec();
        assert_eq!(with_out(&argv, Path::new("/x")), ["experiment", "--world", "w", "--out", "/x"]);
    }

    #[test]
    fn prompt_accepts_words_and_ids() {
        let info = BackendInfo::from_token_table(vec!["<end>".into(), "a".into(), "dog".into()], Some(0));
        assert_eq!(parse_prompt("a 2 dog", &info).unwrap(), vec![1, 2, 2]);
        assert_eq!(parse_prompt("3", &info).unwrap_err().code, 1);
        assert_eq!(parse_prompt("cat", &info).unwrap_err().code, 1);
        assert!(parse_prompt("  ", &info).unwrap().is_empty());
    }
}
